//! Fixed-name output files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dtdl::experiment::SweepRow;
use dtdl::model_io::{self, ModelFile};
use dtdl::{DisaggregationReport, DtdlModel};
use serde::Serialize;

pub const MODEL: &str = "model.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const METRICS: &str = "metrics.json";
pub const SWEEP: &str = "sweep.csv";
pub const GRADCHECK: &str = "gradcheck.json";

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn write_model(dir: &Path, model: &DtdlModel) -> Result<()> {
    write(&dir.join(MODEL), &model_io::to_json(&ModelFile::from(model))?)?;
    write(&dir.join(TRAINING_LOG), &training_log_csv(model))
}

pub fn training_log_csv(model: &DtdlModel) -> String {
    let mut s = String::from("iter,J,J1,J2,J3,J4,smoothness_residual,dict_delta\n");
    for e in &model.training_log {
        let o = &e.objective;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.iter, o.j, o.j1, o.j2, o.j3, o.j4, o.smoothness_residual, e.dict_delta
        );
    }
    s
}

pub fn write_report(dir: &Path, report: &DisaggregationReport) -> Result<()> {
    write_json(&dir.join(REPORT_JSON), report)?;
    write(&dir.join(REPORT_CSV), &report_csv(report))
}

/// One row per window and device; energy in watt-seconds.
pub fn report_csv(report: &DisaggregationReport) -> String {
    let mut s = String::from("window,start_sample,device,on,mean_w,energy_ws\n");
    for w in &report.windows {
        for (name, (est, on)) in report.device_names.iter().zip(w.estimates.iter().zip(&w.on)) {
            let energy: f64 = est.iter().sum();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                w.window,
                w.window * report.omega,
                name,
                u8::from(*on),
                energy / est.len() as f64,
                energy
            );
        }
    }
    s
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut s = String::from("m,omega,lambda2,lambda3,lambda4,validation_acc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.m, r.omega, r.lambda2, r.lambda3, r.lambda4, r.validation_acc
        );
    }
    write(&dir.join(SWEEP), &s)
}
