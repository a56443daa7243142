//! Run configuration: defaults, then a JSON file, then `--set` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dtdl::experiment::SweepGrid;
use dtdl::{EvalConfig, SyntheticSpec};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides both `hyper.seed` and `synth.seed` when set.
    pub seed: Option<u64>,
    /// Dataset manifest, or a directory holding `manifest.json`.
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub hyper: dtdl::HyperParams,
    pub disaggregation: dtdl::DisaggregationOptions,
    pub cdl: dtdl::baselines::CdlOptions,
    pub week_one_fraction: f64,
    pub on_threshold_w: f64,
    pub synth: SyntheticSpec,
    pub sweep: SweepGrid,
    pub gradcheck_cases: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            seed: None,
            data: None,
            model: None,
            out: None,
            hyper: eval.hyper,
            disaggregation: eval.disaggregation,
            cdl: eval.cdl,
            week_one_fraction: eval.week_one_fraction,
            on_threshold_w: eval.on_threshold_w,
            synth: SyntheticSpec::default(),
            sweep: SweepGrid::default(),
            gradcheck_cases: 25,
        }
    }
}

impl RunConfig {
    /// Merges `file` and then each `key=value` override onto the defaults.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let parsed: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !parsed.is_object() {
                bail!("config {} must be a JSON object", path.display());
            }
            merge(&mut value, parsed);
        }
        for set in sets {
            apply_set(&mut value, set)?;
        }
        let mut cfg: Self = serde_json::from_value(value).context("invalid configuration")?;
        if let Some(seed) = cfg.seed {
            cfg.hyper.seed = seed;
            cfg.synth.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.synth.validate()?;
        if !(self.week_one_fraction > 0.0 && self.week_one_fraction < 1.0) {
            bail!("week_one_fraction must lie in (0, 1), got {}", self.week_one_fraction);
        }
        if !(self.disaggregation.tau_rel.is_finite() && self.disaggregation.tau_rel >= 0.0) {
            bail!("disaggregation.tau_rel must be finite and >= 0");
        }
        if self.cdl.atoms_per_device == 0 {
            bail!("cdl.atoms_per_device must be positive");
        }
        Ok(())
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            hyper: self.hyper.clone(),
            disaggregation: self.disaggregation,
            cdl: self.cdl,
            week_one_fraction: self.week_one_fraction,
            on_threshold_w: self.on_threshold_w,
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("no output directory; pass --out or set \"out\""))
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| anyhow!("no dataset; pass --data or set \"data\""))
    }

    pub fn model_path(&self) -> Result<&Path> {
        self.model.as_deref().ok_or_else(|| anyhow!("no model file; pass --model or set \"model\""))
    }
}

/// Recursive object merge. A tagged object whose `kind` changes is replaced
/// whole, so fields of the old variant do not leak into the new one.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changes = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is read as JSON, falling back to a plain string.
fn apply_set(root: &mut Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got {set:?}"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("--set has an empty key segment in {key:?}");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut over = value;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), over);
        over = Value::Object(m);
    }
    merge(root, over);
    Ok(())
}
