//! Disaggregation accuracy and on/off detection scores, all in percent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(1 - sum_k sum_i ||est - truth||_1 / (2 sum_k ||Y(k)||_1)) * 100`.
///
/// `estimates` and `truths` are indexed `[k][i][t]`, `aggregates` `[k][t]`.
pub fn disagg_accuracy(estimates: &[Vec<Vec<f64>>], truths: &[Vec<Vec<f64>>], aggregates: &[Vec<f64>]) -> Result<f64> {
    if estimates.len() != truths.len() || truths.len() != aggregates.len() {
        return Err(Error::Dimension(format!(
            "{} estimate windows, {} truth windows, {} aggregate windows",
            estimates.len(),
            truths.len(),
            aggregates.len()
        )));
    }
    let mut err = 0.0;
    for (k, (est, tru)) in estimates.iter().zip(truths).enumerate() {
        if est.len() != tru.len() {
            return Err(Error::Dimension(format!("window {k}: device counts differ")));
        }
        for (e, t) in est.iter().zip(tru) {
            if e.len() != t.len() {
                return Err(Error::Dimension(format!("window {k}: snippet lengths differ")));
            }
            err += e.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
    }
    let mass: f64 = aggregates.iter().flatten().map(|v| v.abs()).sum();
    if mass == 0.0 {
        return Err(Error::Dimension("accuracy is undefined for an all-zero aggregate".into()));
    }
    Ok((1.0 - err / (2.0 * mass)) * 100.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(est: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&e, &t) in est.iter().zip(truth) {
            match (e, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// A device never on and never predicted on scores 100; an empty
    /// denominator otherwise scores 0.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.tp + self.fn_ == 0 {
                100.0
            } else {
                0.0
            }
        } else {
            100.0 * self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            if self.tp + self.fp == 0 {
                100.0
            } else {
                0.0
            }
        } else {
            100.0 * self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

pub fn precision_recall(est: &[bool], truth: &[bool]) -> Result<(f64, f64, Confusion)> {
    if est.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} estimated flags vs {} true flags",
            est.len(),
            truth.len()
        )));
    }
    let c = Confusion::count(est, truth);
    Ok((c.precision(), c.recall(), c))
}

/// Harmonic mean of `p` and `r`; zero when both are zero.
pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc: f64,
    /// Unweighted means over devices.
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub devices: Vec<DeviceMetrics>,
}

/// Accuracy plus per-device and macro-averaged detection scores. Flags are
/// indexed `[k][i]`.
pub fn evaluate(
    estimates: &[Vec<Vec<f64>>],
    truths: &[Vec<Vec<f64>>],
    aggregates: &[Vec<f64>],
    est_flags: &[Vec<bool>],
    truth_flags: &[Vec<bool>],
    device_names: &[String],
) -> Result<MetricSet> {
    let acc = disagg_accuracy(estimates, truths, aggregates)?;
    if est_flags.len() != truth_flags.len() {
        return Err(Error::Dimension("flag window counts differ".into()));
    }
    let mut devices = Vec::with_capacity(device_names.len());
    for (i, name) in device_names.iter().enumerate() {
        let column = |flags: &[Vec<bool>]| -> Result<Vec<bool>> {
            flags
                .iter()
                .map(|row| row.get(i).copied().ok_or_else(|| Error::Dimension(format!("no flag for device {i}"))))
                .collect()
        };
        let (p, r, confusion) = precision_recall(&column(est_flags)?, &column(truth_flags)?)?;
        devices.push(DeviceMetrics {
            name: name.clone(),
            precision: p,
            recall: r,
            f_score: f_score(p, r),
            confusion,
        });
    }
    let n = devices.len().max(1) as f64;
    Ok(MetricSet {
        acc,
        precision: devices.iter().map(|d| d.precision).sum::<f64>() / n,
        recall: devices.iter().map(|d| d.recall).sum::<f64>() / n,
        f_score: devices.iter().map(|d| d.f_score).sum::<f64>() / n,
        devices,
    })
}
