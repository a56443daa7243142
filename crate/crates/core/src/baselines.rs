//! Comparison methods: classic dictionary learning with binary codes in
//! signal space, and simple mean prediction.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{self, Dictionary, DualAscentOptions};
use crate::error::{Error, Result};
use crate::signal::{Scaler, WindowedDataset};

/// Signal-space dictionary (`omega x N`) over normalized snippets.
#[derive(Debug, Clone, PartialEq)]
pub struct CdlModel {
    pub dictionary: Dictionary,
    pub scaler: Scaler,
    pub lambda1: f64,
    pub device_names: Vec<String>,
    /// Mean squared reconstruction error of the training snippets after
    /// each iteration (entry 0 is the initialization).
    pub training_error: Vec<f64>,
}

/// Greedy binary coding with at most one atom per device.
///
/// Starting from the empty selection, the (device, atom) pair that most
/// lowers `||y - sum selected||^2 + lambda1 * |selected|` is added until no
/// addition helps. Returns the 0/1 indicator over all atoms.
pub fn cdl_code(y: &[f64], dict: &Dictionary, lambda1: f64) -> Vec<f64> {
    let mut residual = DVector::from_column_slice(y);
    let mut code = vec![0.0; dict.n_atoms()];
    let mut used = vec![false; dict.devices()];
    let mut value = residual.norm_squared();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            for j in dict.block_range(i) {
                let cand = (&residual - dict.atoms().column(j)).norm_squared() + lambda1;
                if best.is_none_or(|(_, _, b)| cand < b) {
                    best = Some((i, j, cand));
                }
            }
        }
        match best {
            Some((i, j, cand)) if cand < value => {
                residual -= dict.atoms().column(j);
                code[j] = 1.0;
                used[i] = true;
                value = cand;
            }
            _ => return code,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdlOptions {
    pub lambda1: f64,
    pub iters: usize,
    pub atoms_per_device: usize,
    pub dual: DualAscentOptions,
}

impl Default for CdlOptions {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            iters: 20,
            atoms_per_device: 20,
            dual: DualAscentOptions::default(),
        }
    }
}

fn mean_sq_error(snippets: &DMatrix<f64>, dict: &Dictionary, codes: &DMatrix<f64>) -> f64 {
    (snippets - dict.atoms() * codes).norm_squared() / snippets.ncols().max(1) as f64
}

/// Codes each training snippet against its own device block.
fn training_codes(snippets: &DMatrix<f64>, dict: &Dictionary, lambda1: f64) -> DMatrix<f64> {
    let l = dict.devices();
    let cols: Vec<Vec<f64>> = (0..snippets.ncols())
        .into_par_iter()
        .map(|c| {
            let i = c % l;
            let r = dict.block_range(i);
            let sub = Dictionary::new(dict.block(i), vec![r.len()]).expect("non-empty block");
            let local = cdl_code(snippets.column(c).as_slice(), &sub, lambda1);
            let mut full = vec![0.0; dict.n_atoms()];
            full[r].copy_from_slice(&local);
            full
        })
        .collect();
    DMatrix::from_fn(dict.n_atoms(), cols.len(), |r, c| cols[c][r])
}

/// Alternates binary coding with the norm-constrained least-squares
/// dictionary update. Atoms no snippet uses keep their previous value.
pub fn cdl_train<R: Rng>(ds: &WindowedDataset, opts: &CdlOptions, rng: &mut R) -> Result<CdlModel> {
    let l = ds.devices();
    let k = ds.windows();
    if k == 0 || l == 0 || opts.atoms_per_device == 0 {
        return Err(Error::Dimension("CDL needs windows, devices and atoms".into()));
    }
    let omega = ds.omega();
    let mut snippets = DMatrix::zeros(omega, k * l);
    for w in 0..k {
        for i in 0..l {
            snippets.set_column(w * l + i, &DVector::from_vec(ds.normalized_device(w, i)));
        }
    }
    let mut atoms = DMatrix::zeros(omega, l * opts.atoms_per_device);
    for i in 0..l {
        let picks: Vec<usize> = if opts.atoms_per_device <= k {
            sample(rng, k, opts.atoms_per_device).into_vec()
        } else {
            (0..opts.atoms_per_device).map(|_| rng.random_range(0..k)).collect()
        };
        for (n, w) in picks.into_iter().enumerate() {
            atoms.set_column(i * opts.atoms_per_device + n, &snippets.column(w * l + i));
        }
    }
    let mut dict = Dictionary::new(dictionary::project_columns(&atoms), vec![opts.atoms_per_device; l])?;
    let mut codes = training_codes(&snippets, &dict, opts.lambda1);
    let mut training_error = vec![mean_sq_error(&snippets, &dict, &codes)];
    for _ in 0..opts.iters {
        let res = dictionary::dual_ascent(&snippets, &codes, &opts.dual, None)?;
        let mut next = res.atoms;
        for j in 0..dict.n_atoms() {
            if codes.row(j).iter().all(|&v| v == 0.0) {
                next.set_column(j, &dict.atoms().column(j));
            }
        }
        let cand = dict.with_atoms(next)?;
        if mean_sq_error(&snippets, &cand, &codes) <= mean_sq_error(&snippets, &dict, &codes) {
            dict = cand;
        }
        codes = training_codes(&snippets, &dict, opts.lambda1);
        training_error.push(mean_sq_error(&snippets, &dict, &codes));
    }
    Ok(CdlModel {
        dictionary: dict,
        scaler: ds.scaler,
        lambda1: opts.lambda1,
        device_names: ds.device_names().to_vec(),
        training_error,
    })
}

/// Per-window estimates (`[i]`, watts) and flags for one aggregate window.
pub fn cdl_disaggregate_window(model: &CdlModel, watts: &[f64]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let y = model.scaler.normalize(watts);
    let code = cdl_code(&y, &model.dictionary, model.lambda1);
    let dict = &model.dictionary;
    let mut est = Vec::with_capacity(dict.devices());
    let mut on = Vec::with_capacity(dict.devices());
    for i in 0..dict.devices() {
        match dict.block_range(i).find(|&j| code[j] != 0.0) {
            Some(j) => {
                let col: Vec<f64> = dict.atoms().column(j).iter().copied().collect();
                est.push(model.scaler.denormalize(&col).into_iter().map(|w| w.max(0.0)).collect());
                on.push(true);
            }
            None => {
                est.push(vec![0.0; watts.len()]);
                on.push(false);
            }
        }
    }
    (est, on)
}

/// `[k][i]` estimates and flags over every aggregate window of `ds`.
pub fn cdl_disaggregate(model: &CdlModel, ds: &WindowedDataset) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<bool>>) {
    let per: Vec<(Vec<Vec<f64>>, Vec<bool>)> = (0..ds.windows())
        .into_par_iter()
        .map(|k| cdl_disaggregate_window(model, ds.aggregate(k)))
        .collect();
    per.into_iter().unzip()
}

/// Simple mean prediction: every window gets each device's training-mean snippet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpModel {
    pub device_names: Vec<String>,
    /// `[i]`: mean snippet in watts.
    pub mean_snippets: Vec<Vec<f64>>,
    /// `[i]`: fraction of training windows in which the device was on.
    pub on_fraction: Vec<f64>,
}

/// `flags` is indexed `[k][i]`.
pub fn smp_train(ds: &WindowedDataset, flags: &[Vec<bool>]) -> Result<SmpModel> {
    let (k, l, omega) = (ds.windows(), ds.devices(), ds.omega());
    if k == 0 || flags.len() != k {
        return Err(Error::Dimension(format!("{} flag rows for {k} windows", flags.len())));
    }
    let mut mean_snippets = vec![vec![0.0; omega]; l];
    let mut on_fraction = vec![0.0; l];
    for w in 0..k {
        for i in 0..l {
            for (m, v) in mean_snippets[i].iter_mut().zip(ds.device(w, i)) {
                *m += v;
            }
            if flags[w][i] {
                on_fraction[i] += 1.0;
            }
        }
    }
    for i in 0..l {
        mean_snippets[i].iter_mut().for_each(|m| *m /= k as f64);
        on_fraction[i] /= k as f64;
    }
    Ok(SmpModel {
        device_names: ds.device_names().to_vec(),
        mean_snippets,
        on_fraction,
    })
}

/// Estimates and flags for `windows` windows.
pub fn smp_predict(model: &SmpModel, windows: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<bool>>) {
    let flags: Vec<bool> = model.on_fraction.iter().map(|&f| f > 0.5).collect();
    (vec![model.mean_snippets.clone(); windows], vec![flags; windows])
}
