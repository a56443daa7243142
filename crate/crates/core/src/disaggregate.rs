//! Test-time disaggregation: encode each aggregate window, code it against
//! the full dictionary, and decode every device's share.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm;
use crate::signal::WindowedDataset;
use crate::sparse::{self, AdmmOptions};
use crate::trainer::DtdlModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisaggregationOptions {
    /// A device is on when `||a^i||_1 > tau_rel * max(1, ||a||_1)`.
    pub tau_rel: f64,
    pub lasso: AdmmOptions,
}

impl Default for DisaggregationOptions {
    fn default() -> Self {
        Self {
            tau_rel: 1e-4,
            lasso: sparse::lasso_options(),
        }
    }
}

/// On iff `||a_i||_1 > tau`.
pub fn on_off(code: &[f64], tau: f64) -> bool {
    code.iter().map(|v| v.abs()).sum::<f64>() > tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEstimate {
    pub window: usize,
    /// Full code vector `a*`.
    pub code: Vec<f64>,
    /// `[i]`: estimated snippet of device `i`, in watts.
    pub estimates: Vec<Vec<f64>>,
    pub on: Vec<bool>,
    pub lasso_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisaggregationReport {
    pub omega: usize,
    pub device_names: Vec<String>,
    pub windows: Vec<WindowEstimate>,
    /// Watt-samples per device over all windows.
    pub totals: Vec<f64>,
}

impl DisaggregationReport {
    /// `[k][i]` estimates.
    pub fn estimates(&self) -> Vec<Vec<Vec<f64>>> {
        self.windows.iter().map(|w| w.estimates.clone()).collect()
    }

    /// `[k][i]` on/off flags.
    pub fn flags(&self) -> Vec<Vec<bool>> {
        self.windows.iter().map(|w| w.on.clone()).collect()
    }
}

/// Disaggregates one window given in watts.
pub fn disaggregate_window(
    model: &DtdlModel,
    window: usize,
    watts: &[f64],
    opts: &DisaggregationOptions,
) -> Result<WindowEstimate> {
    if watts.len() != model.omega() {
        return Err(Error::Dimension(format!(
            "window has {} samples, model expects {}",
            watts.len(),
            model.omega()
        )));
    }
    let y = model.scaler.normalize(watts);
    let feature = DVector::from_vec(lstm::encode_feature(&model.lstm, &y));
    let lasso = sparse::lasso_code(&feature, &model.dictionary, model.hyper.lambda1, &opts.lasso)?;
    let tau = opts.tau_rel * lasso.code.lp_norm(1).max(1.0);
    let dict = &model.dictionary;
    let mut estimates = Vec::with_capacity(dict.devices());
    let mut on = Vec::with_capacity(dict.devices());
    for i in 0..dict.devices() {
        let r = dict.block_range(i);
        let code_i = lasso.code.rows(r.start, r.len()).into_owned();
        let flag = on_off(code_i.as_slice(), tau);
        let est = if flag {
            model
                .scaler
                .denormalize(&model.decode_code(i, &code_i))
                .into_iter()
                .map(|w| w.max(0.0))
                .collect()
        } else {
            vec![0.0; model.omega()]
        };
        estimates.push(est);
        on.push(flag);
    }
    Ok(WindowEstimate {
        window,
        code: lasso.code.as_slice().to_vec(),
        estimates,
        on,
        lasso_converged: lasso.converged,
    })
}

fn assemble(model: &DtdlModel, windows: Vec<WindowEstimate>) -> DisaggregationReport {
    let l = model.dictionary.devices();
    let mut totals = vec![0.0; l];
    for w in &windows {
        for (t, e) in totals.iter_mut().zip(&w.estimates) {
            *t += e.iter().sum::<f64>();
        }
    }
    DisaggregationReport {
        omega: model.omega(),
        device_names: model.device_names.clone(),
        windows,
        totals,
    }
}

/// Cuts `aggregate` into windows (trailing samples dropped) and disaggregates each.
pub fn disaggregate_signal(model: &DtdlModel, aggregate: &[f64], opts: &DisaggregationOptions) -> Result<DisaggregationReport> {
    let omega = model.omega();
    if aggregate.len() < omega {
        return Err(Error::TooShort {
            len: aggregate.len(),
            omega,
        });
    }
    let windows = aggregate
        .par_chunks_exact(omega)
        .enumerate()
        .map(|(k, w)| disaggregate_window(model, k, w, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(model, windows))
}

/// Disaggregates the aggregate windows of `ds`.
pub fn disaggregate_dataset(model: &DtdlModel, ds: &WindowedDataset, opts: &DisaggregationOptions) -> Result<DisaggregationReport> {
    let windows = (0..ds.windows())
        .into_par_iter()
        .map(|k| disaggregate_window(model, k, ds.aggregate(k), opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(model, windows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_off_cases() {
        assert!(!on_off(&[0.0, 0.0], 1e-4));
        assert!(on_off(&[0.0, 1e-3], 1e-4));
        assert!(!on_off(&[1e-3], 1e-3));
    }
}
