//! Dictionary update: the constrained least-squares closed form with dual
//! ascent on the atom-norm multipliers, and the gradient step used when the
//! incoherence weight is nonzero.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to the diagonal of `A A^T + Sigma` before factoring.
pub const GRAM_RIDGE: f64 = 1e-10;
/// Column norms may exceed one by at most this much.
pub const NORM_SLACK: f64 = 1e-9;

/// A `d x N` dictionary split into consecutive per-device blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
    per_device_atoms: Vec<usize>,
    offsets: Vec<usize>,
}

impl Dictionary {
    pub fn new(atoms: DMatrix<f64>, per_device_atoms: Vec<usize>) -> Result<Self> {
        if per_device_atoms.is_empty() || per_device_atoms.contains(&0) {
            return Err(Error::Dimension("every device needs at least one atom".into()));
        }
        let total: usize = per_device_atoms.iter().sum();
        if total != atoms.ncols() {
            return Err(Error::Dimension(format!(
                "blocks hold {total} atoms, matrix has {} columns",
                atoms.ncols()
            )));
        }
        let mut offsets = Vec::with_capacity(per_device_atoms.len() + 1);
        offsets.push(0);
        for n in &per_device_atoms {
            offsets.push(offsets.last().unwrap() + n);
        }
        Ok(Self {
            atoms,
            per_device_atoms,
            offsets,
        })
    }

    pub fn d(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn devices(&self) -> usize {
        self.per_device_atoms.len()
    }

    pub fn per_device_atoms(&self) -> &[usize] {
        &self.per_device_atoms
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn block_range(&self, device: usize) -> Range<usize> {
        self.offsets[device]..self.offsets[device + 1]
    }

    /// Device `i`'s sub-dictionary `D_i`.
    pub fn block(&self, device: usize) -> DMatrix<f64> {
        let r = self.block_range(device);
        self.atoms.columns(r.start, r.len()).into_owned()
    }

    /// Same block layout, new entries.
    pub fn with_atoms(&self, atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.shape() != self.atoms.shape() {
            return Err(Error::Dimension(format!(
                "expected a {:?} dictionary, got {:?}",
                self.atoms.shape(),
                atoms.shape()
            )));
        }
        Ok(Self {
            atoms,
            per_device_atoms: self.per_device_atoms.clone(),
            offsets: self.offsets.clone(),
        })
    }

    pub fn is_feasible(&self) -> bool {
        self.atoms.column_iter().all(|c| c.norm() <= 1.0 + NORM_SLACK)
    }

    /// Mean absolute entry change, the outer-loop convergence measure.
    pub fn mean_abs_change(&self, other: &Dictionary) -> f64 {
        let n = self.atoms.len().max(1) as f64;
        self.atoms.iter().zip(other.atoms.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }

    /// Each device's atoms are drawn without replacement from its own columns
    /// of `features` (column `k*L + i`), then projected.
    pub fn init_from_features<R: Rng>(
        features: &DMatrix<f64>,
        devices: usize,
        atoms_per_device: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if devices == 0 || !features.ncols().is_multiple_of(devices) {
            return Err(Error::Dimension("feature columns must be K * L".into()));
        }
        let windows = features.ncols() / devices;
        if windows == 0 {
            return Err(Error::Dimension("no windows to initialize from".into()));
        }
        let d = features.nrows();
        let mut atoms = DMatrix::zeros(d, devices * atoms_per_device);
        for i in 0..devices {
            let picks: Vec<usize> = if atoms_per_device <= windows {
                sample(rng, windows, atoms_per_device).into_vec()
            } else {
                (0..atoms_per_device).map(|_| rng.random_range(0..windows)).collect()
            };
            for (n, k) in picks.into_iter().enumerate() {
                atoms.set_column(i * atoms_per_device + n, &features.column(k * devices + i));
            }
        }
        Self::new(project_columns(&atoms), vec![atoms_per_device; devices])
    }
}

/// Rescales every column with norm above one to unit norm.
pub fn project_columns(d: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = d.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n > 1.0 {
            col /= n;
        }
    }
    out
}

/// `D = F A^T (A A^T + Sigma)^{-1}` with `Sigma = (L K) diag(phi)`, where
/// `L K` is the number of feature columns.
pub fn closed_form_d(features: &DMatrix<f64>, codes: &DMatrix<f64>, phi: &[f64]) -> Result<DMatrix<f64>> {
    let n = codes.nrows();
    if features.ncols() != codes.ncols() || phi.len() != n {
        return Err(Error::Dimension(format!(
            "F is {:?}, A is {:?}, phi has {} entries",
            features.shape(),
            codes.shape(),
            phi.len()
        )));
    }
    let lk = features.ncols() as f64;
    let mut gram = codes * codes.transpose();
    for j in 0..n {
        gram[(j, j)] += lk * phi[j] + GRAM_RIDGE;
    }
    let chol = gram.cholesky().ok_or(Error::Singular)?;
    // D^T = gram^{-1} A F^T
    let rhs = codes * features.transpose();
    let dt = chol.solve(&rhs);
    if dt.iter().all(|v| v.is_finite()) {
        Ok(dt.transpose())
    } else {
        Err(Error::Singular)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualAscentOptions {
    pub step: f64,
    pub max_iters: usize,
    /// KKT tolerance used as the stopping rule.
    pub tol: f64,
}

impl Default for DualAscentOptions {
    fn default() -> Self {
        Self {
            step: 0.01,
            max_iters: 1000,
            tol: 1e-4,
        }
    }
}

/// KKT residuals of the norm-constrained least-squares problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `max_j max(0, ||D_j||^2 - 1)`
    pub feasibility: f64,
    /// `max_j phi_j |(||D_j||^2 - 1)|`
    pub complementarity: f64,
    /// `max_j max(0, -phi_j)`
    pub dual_feasibility: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.feasibility.max(self.complementarity).max(self.dual_feasibility)
    }
}

#[derive(Debug, Clone)]
pub struct DualAscentResult {
    pub phi: Vec<f64>,
    /// `closed_form_d` at the final multipliers, projected onto the norm ball.
    pub atoms: DMatrix<f64>,
    /// Residuals of the unprojected closed-form dictionary.
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub converged: bool,
}

/// `||D_j||^2 - 1` for every column: the dual gradient.
pub fn dual_gradient(d: &DMatrix<f64>) -> Vec<f64> {
    d.column_iter().map(|c| c.norm_squared() - 1.0).collect()
}

pub fn kkt_residuals(d: &DMatrix<f64>, phi: &[f64]) -> KktResiduals {
    let grad = dual_gradient(d);
    KktResiduals {
        feasibility: grad.iter().fold(0.0, |m, &g| m.max(g)),
        complementarity: grad.iter().zip(phi).fold(0.0, |m, (&g, &p)| m.max((p * g).abs())),
        dual_feasibility: phi.iter().fold(0.0, |m, &p| m.max(-p)),
    }
}

/// Lagrangian dual value `(1/LK)||F - D A||^2 + sum_j phi_j (||D_j||^2 - 1)`
/// at the minimizing `D`.
fn dual_value(features: &DMatrix<f64>, codes: &DMatrix<f64>, d: &DMatrix<f64>, phi: &[f64]) -> f64 {
    let lk = features.ncols().max(1) as f64;
    let fit = (features - d * codes).norm_squared() / lk;
    fit + dual_gradient(d).iter().zip(phi).map(|(g, p)| g * p).sum::<f64>()
}

/// Projected gradient ascent on `phi >= 0`. A step that lowers the dual value
/// is retried at half length.
pub fn dual_ascent(
    features: &DMatrix<f64>,
    codes: &DMatrix<f64>,
    opts: &DualAscentOptions,
    phi0: Option<&[f64]>,
) -> Result<DualAscentResult> {
    if !(opts.step > 0.0 && opts.tol > 0.0) {
        return Err(Error::InvalidHyper(format!("dual ascent options must be positive: {opts:?}")));
    }
    let n = codes.nrows();
    let mut phi: Vec<f64> = match phi0 {
        Some(p) if p.len() == n => p.iter().map(|v| v.max(0.0)).collect(),
        _ => vec![0.0; n],
    };
    let mut d = closed_form_d(features, codes, &phi)?;
    let mut value = dual_value(features, codes, &d, &phi);
    let mut step = opts.step;
    let mut iterations = 0;
    let mut converged = kkt_residuals(&d, &phi).max() <= opts.tol;

    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let grad = dual_gradient(&d);
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = phi.iter().zip(&grad).map(|(p, g)| (p + step * g).max(0.0)).collect();
            let d_trial = closed_form_d(features, codes, &trial)?;
            let v_trial = dual_value(features, codes, &d_trial, &trial);
            if v_trial >= value - 1e-15 * value.abs().max(1.0) {
                phi = trial;
                d = d_trial;
                value = v_trial;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
        converged = kkt_residuals(&d, &phi).max() <= opts.tol;
    }

    let kkt = kkt_residuals(&d, &phi);
    Ok(DualAscentResult {
        phi,
        atoms: project_columns(&d),
        kkt,
        iterations,
        converged,
    })
}

/// `sum_i sum_{j != i} ||D_i^T D_j||_F^2` over ordered device pairs.
pub fn incoherence_value(dict: &Dictionary) -> f64 {
    let blocks: Vec<DMatrix<f64>> = (0..dict.devices()).map(|i| dict.block(i)).collect();
    let mut total = 0.0;
    for i in 0..blocks.len() {
        for j in 0..blocks.len() {
            if i != j {
                total += (blocks[i].transpose() * &blocks[j]).norm_squared();
            }
        }
    }
    total
}

/// `(1/LK) ||F - D A||_F^2`; with support-restricted codes `D A` is
/// `D_i a^i(k)` column by column.
fn fit_term(dict: &Dictionary, features: &DMatrix<f64>, codes: &DMatrix<f64>) -> f64 {
    let lk = features.ncols().max(1) as f64;
    (features - dict.atoms() * codes).norm_squared() / lk
}

/// `(1/LK) ||F - D A||_F^2 + lambda2 * J2`, the dictionary sub-objective.
pub fn dictionary_objective(dict: &Dictionary, features: &DMatrix<f64>, codes: &DMatrix<f64>, lambda2: f64) -> f64 {
    fit_term(dict, features, codes) + lambda2 * incoherence_value(dict)
}

/// Exact gradient of [`dictionary_objective`] with respect to `D`:
/// `(2/LK)(D A - F) A^T + 4 lambda2 (D D^T - D_i D_i^T) D_i` on block `i`.
pub fn incoherence_gradient(dict: &Dictionary, features: &DMatrix<f64>, codes: &DMatrix<f64>, lambda2: f64) -> DMatrix<f64> {
    let lk = features.ncols().max(1) as f64;
    let d = dict.atoms();
    let mut grad = (d * codes - features) * codes.transpose() * (2.0 / lk);
    if lambda2 != 0.0 {
        let p = d * d.transpose();
        for i in 0..dict.devices() {
            let r = dict.block_range(i);
            let di = d.columns(r.start, r.len());
            let others = &p - di * di.transpose();
            let g = others * di * (4.0 * lambda2);
            let mut dst = grad.columns_mut(r.start, r.len());
            dst += g;
        }
    }
    grad
}

#[derive(Debug, Clone)]
pub struct GradStep {
    pub dict: Dictionary,
    pub objective_before: f64,
    pub objective_after: f64,
    pub halvings: u32,
}

/// One projected gradient step on [`dictionary_objective`], halving the step
/// up to 20 times until the objective does not increase. If no trial step
/// qualifies the dictionary is returned unchanged.
pub fn incoherence_grad_step(
    dict: &Dictionary,
    features: &DMatrix<f64>,
    codes: &DMatrix<f64>,
    lambda2: f64,
    step: f64,
) -> Result<GradStep> {
    if features.nrows() != dict.d() || codes.nrows() != dict.n_atoms() || codes.ncols() != features.ncols() {
        return Err(Error::Dimension("F, D and A do not compose".into()));
    }
    let before = dictionary_objective(dict, features, codes, lambda2);
    let grad = incoherence_gradient(dict, features, codes, lambda2);
    let mut eta = step;
    for halvings in 0..=20 {
        let trial = dict.with_atoms(project_columns(&(dict.atoms() - &grad * eta)))?;
        let after = dictionary_objective(&trial, features, codes, lambda2);
        if after <= before {
            return Ok(GradStep {
                dict: trial,
                objective_before: before,
                objective_after: after,
                halvings,
            });
        }
        eta /= 2.0;
    }
    Ok(GradStep {
        dict: dict.clone(),
        objective_before: before,
        objective_after: before,
        halvings: 21,
    })
}

/// Column norms of `D`, handy for diagnostics.
pub fn column_norms(d: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(d.ncols(), d.column_iter().map(|c| c.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn closed_form_identity_codes() {
        let f = random(3, 4, 1);
        let d = closed_form_d(&f, &DMatrix::identity(4, 4), &[0.0; 4]).unwrap();
        assert!((d - &f).abs().max() < 1e-8);
    }

    #[test]
    fn closed_form_large_multipliers_vanish() {
        let f = random(3, 4, 2);
        let a = random(5, 4, 3);
        let d = closed_form_d(&f, &a, &[1e6; 5]).unwrap();
        assert!(d.abs().max() < 1e-5);
    }

    #[test]
    fn closed_form_rejects_bad_shapes() {
        assert!(closed_form_d(&random(2, 3, 4), &random(2, 4, 5), &[0.0; 2]).is_err());
    }

    #[test]
    fn dual_ascent_small_atoms_keep_zero_multipliers() {
        let f = random(3, 6, 6) * 0.05;
        let a = random(4, 6, 7);
        let res = dual_ascent(&f, &a, &DualAscentOptions::default(), None).unwrap();
        let unconstrained = closed_form_d(&f, &a, &[0.0; 4]).unwrap();
        assert!(unconstrained.column_iter().all(|c| c.norm() <= 1.0));
        assert!(res.phi.iter().all(|&p| p == 0.0));
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn dual_gradient_at_zero_reads_column_norms() {
        let f = random(3, 6, 8) * 5.0;
        let a = random(4, 6, 9);
        let d0 = closed_form_d(&f, &a, &[0.0; 4]).unwrap();
        let g = dual_gradient(&d0);
        for (j, c) in d0.column_iter().enumerate() {
            assert!((g[j] - (c.norm_squared() - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_ascent_oversized_atoms_become_unit() {
        let f = random(3, 8, 10) * 5.0;
        let a = random(4, 8, 11);
        let res = dual_ascent(&f, &a, &DualAscentOptions { max_iters: 100_000, ..Default::default() }, None).unwrap();
        assert!(res.converged, "{:?}", res.kkt);
        let raw = closed_form_d(&f, &a, &res.phi).unwrap();
        for (j, c) in raw.column_iter().enumerate() {
            if res.phi[j] > 1e-3 {
                assert!((c.norm() - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn project_columns_cases() {
        let d = DMatrix::from_column_slice(2, 2, &[2.0, 0.0, 0.3, 0.4]);
        let p = project_columns(&d);
        assert_eq!(p.column(0).as_slice(), &[1.0, 0.0]);
        assert_eq!(p.column(1).as_slice(), &[0.3, 0.4]);
        assert_eq!(project_columns(&p), p);
    }

    #[test]
    fn incoherence_value_cases() {
        let u = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(incoherence_value(&Dictionary::new(u, vec![1, 1]).unwrap()), 2.0);
        let o = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let dict = Dictionary::new(o, vec![1, 1]).unwrap();
        assert_eq!(incoherence_value(&dict), 0.0);
        // orthogonal blocks: gradient equals the least-squares part
        let f = random(2, 3, 12);
        let a = random(2, 3, 13);
        let g0 = incoherence_gradient(&dict, &f, &a, 0.0);
        let g1 = incoherence_gradient(&dict, &f, &a, 0.7);
        assert!((g0 - g1).abs().max() < 1e-15);
    }

    #[test]
    fn grad_step_does_not_increase_objective() {
        let f = random(3, 6, 14);
        let a = random(4, 6, 15);
        let dict = Dictionary::new(project_columns(&random(3, 4, 16)), vec![2, 2]).unwrap();
        let step = incoherence_grad_step(&dict, &f, &a, 0.4, 10.0).unwrap();
        assert!(step.objective_after <= step.objective_before);
        assert!(step.dict.is_feasible());
    }

    #[test]
    fn init_samples_own_device_columns() {
        let f = random(3, 8, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dict = Dictionary::init_from_features(&f, 2, 2, &mut rng).unwrap();
        assert_eq!(dict.per_device_atoms(), &[2, 2]);
        assert!(dict.is_feasible());
        let p = project_columns(&f);
        for i in 0..2 {
            for col in dict.block(i).column_iter() {
                assert!((0..4).any(|k| (p.column(k * 2 + i) - col).norm() < 1e-15));
            }
        }
    }
}
