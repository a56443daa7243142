//! Train-and-evaluate runs shared by the command line and the tests.

use serde::{Deserialize, Serialize};

use crate::baselines::{self, CdlModel, CdlOptions, SmpModel};
use crate::disaggregate::{self, DisaggregationOptions, DisaggregationReport};
use crate::error::Result;
use crate::metrics::{self, MetricSet};
use crate::rng::SeedStream;
use crate::signal::{split_dataset, DatasetSplit, WindowedDataset};
use crate::trainer::{self, DtdlModel, HyperParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hyper: HyperParams,
    pub disaggregation: DisaggregationOptions,
    pub cdl: CdlOptions,
    /// Fraction of the windows forming the first (train + validation) part.
    pub week_one_fraction: f64,
    /// Mean power above which a device counts as on, when no truth flags
    /// come with the data.
    pub on_threshold_w: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            disaggregation: DisaggregationOptions::default(),
            cdl: CdlOptions::default(),
            week_one_fraction: 0.5,
            on_threshold_w: 10.0,
        }
    }
}

impl EvalConfig {
    pub fn split(&self, ds: &WindowedDataset) -> Result<DatasetSplit> {
        let boundary = (ds.windows() as f64 * self.week_one_fraction).round() as usize;
        split_dataset(ds, boundary)
    }
}

/// Ground truth of a partition: `[k][i]` snippets in watts, `[k]`
/// aggregates, `[k][i]` flags.
pub struct Truth {
    pub devices: Vec<Vec<Vec<f64>>>,
    pub aggregates: Vec<Vec<f64>>,
    pub flags: Vec<Vec<bool>>,
}

pub fn truth_of(ds: &WindowedDataset, on_threshold_w: f64) -> Truth {
    Truth {
        devices: (0..ds.windows())
            .map(|k| (0..ds.devices()).map(|i| ds.device(k, i).to_vec()).collect())
            .collect(),
        aggregates: (0..ds.windows()).map(|k| ds.aggregate(k).to_vec()).collect(),
        flags: ds.on_flags(on_threshold_w),
    }
}

pub fn score(estimates: &[Vec<Vec<f64>>], flags: &[Vec<bool>], truth: &Truth, names: &[String]) -> Result<MetricSet> {
    metrics::evaluate(estimates, &truth.devices, &truth.aggregates, flags, &truth.flags, names)
}

pub fn score_report(report: &DisaggregationReport, truth: &Truth, names: &[String]) -> Result<MetricSet> {
    score(&report.estimates(), &report.flags(), truth, names)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: DtdlModel,
    pub report: DisaggregationReport,
    pub cdl_model: CdlModel,
    pub smp_model: SmpModel,
    pub dtdl: MetricSet,
    pub cdl: MetricSet,
    pub smp: MetricSet,
}

/// Trains DTDL, CDL and SMP on the training partition and scores all three
/// on the test partition.
pub fn train_and_evaluate(ds: &WindowedDataset, cfg: &EvalConfig) -> Result<Evaluation> {
    let split = cfg.split(ds)?;
    let names = ds.device_names().to_vec();
    let model = trainer::train(&split.train, &cfg.hyper)?;
    evaluate_with(model, &split, cfg, &names)
}

/// Scores an already trained model against freshly trained baselines.
pub fn evaluate_with(model: DtdlModel, split: &DatasetSplit, cfg: &EvalConfig, names: &[String]) -> Result<Evaluation> {
    let seeds = SeedStream::new(cfg.hyper.seed);
    let test_truth = truth_of(&split.test, cfg.on_threshold_w);
    let report = disaggregate::disaggregate_dataset(&model, &split.test, &cfg.disaggregation)?;
    let dtdl = score_report(&report, &test_truth, names)?;

    let cdl_model = baselines::cdl_train(&split.train, &cfg.cdl, &mut seeds.rng("cdl/init"))?;
    let (cdl_est, cdl_flags) = baselines::cdl_disaggregate(&cdl_model, &split.test);
    let cdl = score(&cdl_est, &cdl_flags, &test_truth, names)?;

    let smp_model = baselines::smp_train(&split.train, &split.train.on_flags(cfg.on_threshold_w))?;
    let (smp_est, smp_flags) = baselines::smp_predict(&smp_model, split.test.windows());
    let smp = score(&smp_est, &smp_flags, &test_truth, names)?;

    Ok(Evaluation {
        model,
        report,
        cdl_model,
        smp_model,
        dtdl,
        cdl,
        smp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn of(split: &DatasetSplit) -> Self {
        Self {
            train: split.train.windows(),
            validation: split.validation.windows(),
            test: split.test.windows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub label: String,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

/// Contents of `metrics.json`: the effective configuration followed by the
/// test scores of every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub windows: SplitSizes,
    pub training_status: trainer::TrainStatus,
    pub training_iterations: usize,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsReport {
    pub fn method(&self, name: &str) -> Option<&MetricSet> {
        self.methods.iter().find(|m| m.method == name).map(|m| &m.metrics)
    }
}

impl Evaluation {
    pub fn metrics_report(&self, cfg: &EvalConfig, split: &DatasetSplit) -> MetricsReport {
        let method = |method: &str, label: &str, metrics: &MetricSet| MethodMetrics {
            method: method.into(),
            label: label.into(),
            metrics: metrics.clone(),
        };
        MetricsReport {
            config: EvalConfig {
                hyper: self.model.hyper.clone(),
                ..cfg.clone()
            },
            windows: SplitSizes::of(split),
            training_status: self.model.status,
            training_iterations: self.model.training_log.len(),
            methods: vec![
                method("dtdl", "deep temporal dictionary learning", &self.dtdl),
                method("cdl", "classic dictionary learning", &self.cdl),
                method("smp", "simple mean prediction", &self.smp),
            ],
        }
    }
}

/// Validation accuracy of DTDL for one configuration.
pub fn validation_accuracy(split: &DatasetSplit, hyper: &HyperParams, cfg: &EvalConfig) -> Result<f64> {
    let model = trainer::train(&split.train, hyper)?;
    let report = disaggregate::disaggregate_dataset(&model, &split.validation, &cfg.disaggregation)?;
    let truth = truth_of(&split.validation, cfg.on_threshold_w);
    Ok(score_report(&report, &truth, &model.device_names)?.acc)
}

/// Cartesian validation grid. An empty axis keeps the base configuration's
/// value. The default sweeps `m` and `omega` over a 5 x 5 shape grid;
/// [`SweepGrid::lambda_axis`] gives the 0 to 1.4 weight axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub ms: Vec<usize>,
    pub omegas: Vec<usize>,
    pub lambda2s: Vec<f64>,
    pub lambda3s: Vec<f64>,
    pub lambda4s: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            ms: vec![5, 7, 9, 11, 13],
            omegas: vec![8, 10, 12, 14, 16],
            lambda2s: Vec::new(),
            lambda3s: Vec::new(),
            lambda4s: Vec::new(),
        }
    }
}

impl SweepGrid {
    pub fn lambda_axis() -> Vec<f64> {
        (0..8).map(|i| f64::from(i) * 0.2).collect()
    }

    /// Cells in row-major order over `(m, omega, lambda2, lambda3, lambda4)`.
    pub fn cells(&self, base: &HyperParams) -> Vec<HyperParams> {
        fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        for m in axis(&self.ms, base.m) {
            for omega in axis(&self.omegas, base.omega) {
                for lambda2 in axis(&self.lambda2s, base.lambda2) {
                    for lambda3 in axis(&self.lambda3s, base.lambda3) {
                        for lambda4 in axis(&self.lambda4s, base.lambda4) {
                            out.push(HyperParams {
                                m,
                                omega,
                                lambda2,
                                lambda3,
                                lambda4,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub omega: usize,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub validation_acc: f64,
}

/// Trains one model per grid cell and scores it on the validation part.
/// `windowed` cuts the source signals for a given window length.
pub fn validate_grid(
    windowed: impl Fn(usize) -> Result<WindowedDataset>,
    grid: &SweepGrid,
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    grid.cells(&cfg.hyper)
        .into_iter()
        .map(|hp| {
            let split = cfg.split(&windowed(hp.omega)?)?;
            Ok(SweepRow {
                m: hp.m,
                omega: hp.omega,
                lambda2: hp.lambda2,
                lambda3: hp.lambda3,
                lambda4: hp.lambda4,
                validation_acc: validation_accuracy(&split, &hp, cfg)?,
            })
        })
        .collect()
}
