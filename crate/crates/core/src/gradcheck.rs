//! Central finite-difference checks of the analytic gradients.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{self, Dictionary};
use crate::lstm::{self, LossWeights, LstmAeParams};
use crate::rng::SeedStream;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn central_diff(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + step;
            let up = f(&probe);
            probe[j] = x[j] - step;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn summarize(name: String, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max);
    GradCheck {
        name,
        entries: analytic.len(),
        max_rel_error,
        passed: max_rel_error <= REL_TOL,
    }
}

/// Random autoencoder, snippet and encoder target; compares [`lstm::backward`]
/// against differences of [`lstm::snippet_loss`] in every parameter.
pub fn check_lstm(seed: u64, m: usize, omega: usize) -> GradCheck {
    let mut rng = SeedStream::new(seed).rng("gradcheck/lstm");
    let mut params = LstmAeParams::init(m, &mut rng);
    let flat: Vec<f64> = params.flatten().iter().map(|v| v * 5.0 + rng.random_range(-0.2..0.2)).collect();
    params = LstmAeParams::unflatten(m, &flat).expect("flat length matches m");
    let snippet: Vec<f64> = (0..omega).map(|_| rng.random_range(0.0..1.0)).collect();
    let target: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
    let weights = LossWeights {
        recon: rng.random_range(0.5..2.0),
        reg: rng.random_range(0.0..1.0),
    };

    let pass = lstm::forward(&params, &snippet);
    let analytic = lstm::backward(&params, &pass.tape, &target, &snippet, weights)
        .expect("tape matches snippet")
        .flatten();
    let numeric = central_diff(&flat, FD_STEP, |theta| {
        let p = LstmAeParams::unflatten(m, theta).expect("flat length matches m");
        lstm::snippet_loss(&p, &snippet, &target, weights)
    });
    summarize(format!("lstm seed={seed} m={m} omega={omega}"), &analytic, &numeric)
}

/// Random dictionary, features and codes; compares the dictionary-block
/// gradient with differences of the fit-plus-incoherence objective.
pub fn check_dictionary(seed: u64, d: usize, per_device: &[usize], columns: usize, lambda2: f64) -> GradCheck {
    let mut rng = SeedStream::new(seed).rng("gradcheck/dictionary");
    let n: usize = per_device.iter().sum();
    let atoms = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
    let dict = Dictionary::new(atoms, per_device.to_vec()).expect("valid block sizes");
    let features = DMatrix::from_fn(d, columns, |_, _| rng.random_range(-1.0..1.0));
    let codes = DMatrix::from_fn(n, columns, |_, _| rng.random_range(-1.0..1.0));

    let grad = dictionary::incoherence_gradient(&dict, &features, &codes, lambda2);
    let numeric = central_diff(dict.atoms().as_slice(), FD_STEP, |flat| {
        let probe = dict
            .with_atoms(DMatrix::from_column_slice(d, n, flat))
            .expect("same shape");
        dictionary::dictionary_objective(&probe, &features, &codes, lambda2)
    });
    summarize(
        format!("dictionary seed={seed} d={d} N={n} cols={columns}"),
        grad.as_slice(),
        &numeric,
    )
}

/// The default battery: LSTM and dictionary checks over small random shapes.
pub fn run_suite(seed: u64, cases: usize) -> Vec<GradCheck> {
    let mut rng = SeedStream::new(seed).rng("gradcheck/suite");
    let mut out = Vec::with_capacity(2 * cases);
    for c in 0..cases as u64 {
        let m = rng.random_range(1..=4);
        let omega = rng.random_range(2..=6);
        out.push(check_lstm(seed.wrapping_add(c), m, omega));
    }
    for c in 0..cases as u64 {
        let d = rng.random_range(2..=6);
        let devices = rng.random_range(1..=3);
        let per: Vec<usize> = (0..devices).map(|_| rng.random_range(1..=3)).collect();
        let cols = rng.random_range(2..=10);
        let lambda2 = rng.random_range(0.0..1.5);
        out.push(check_dictionary(seed.wrapping_add(c), d, &per, cols, lambda2));
    }
    out
}
