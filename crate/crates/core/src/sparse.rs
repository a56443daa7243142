//! Sparse coding.
//!
//! Training codes are the columns `a^i(k)` of `A` (column `j = k*L + i`,
//! zero-based), each restricted to its device's atom block. They are coupled
//! by the smoothness condition `A G = 0` and solved with a proximal Jacobian
//! ADMM: every column takes an exact proximal step against the previous
//! sweep's values, then the splitting and dual variables are updated.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};

/// Inner coordinate-descent sweeps per proximal step.
const CD_MAX_SWEEPS: usize = 2000;
const CD_TOL: f64 = 1e-14;

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// The `KL x KL` smoothness matrix, stored as `(row, col, value)` triples.
///
/// Column `c < (K-1) L` has `+1` at row `c` and `-1` at row `c + L`, so
/// column `c` of `A G` is `a^i(k) - a^i(k+1)`. The last `L` columns are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessMatrix {
    k: usize,
    l: usize,
    entries: Vec<(usize, usize, f64)>,
}

pub fn build_g(k: usize, l: usize) -> SmoothnessMatrix {
    let pairs = k.saturating_sub(1) * l;
    let mut entries = Vec::with_capacity(2 * pairs);
    for c in 0..pairs {
        entries.push((c, c, 1.0));
        entries.push((c + l, c, -1.0));
    }
    SmoothnessMatrix { k, l, entries }
}

impl SmoothnessMatrix {
    pub fn dim(&self) -> usize {
        self.k * self.l
    }

    pub fn windows(&self) -> usize {
        self.k
    }

    pub fn devices(&self) -> usize {
        self.l
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim(), self.dim());
        for &(r, c, v) in &self.entries {
            g[(r, c)] = v;
        }
        g
    }

    /// Nonzero columns as `(column, [(row, value)])`.
    pub fn constraint_columns(&self) -> Vec<(usize, Vec<(usize, f64)>)> {
        let mut cols: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
        for &(r, c, v) in &self.entries {
            match cols.last_mut() {
                Some((last, members)) if *last == c => members.push((r, v)),
                _ => cols.push((c, vec![(r, v)])),
            }
        }
        cols
    }

    /// `A G`, computed sparsely.
    pub fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), self.dim());
        for &(r, c, v) in &self.entries {
            let col = a.column(r) * v;
            let mut dst = out.column_mut(c);
            dst += col;
        }
        out
    }

    /// Euclidean projection onto `{A : A G = 0}`: every device's codes become
    /// their mean over all windows.
    pub fn project_feasible(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = a.clone();
        if self.k < 2 {
            return out;
        }
        for i in 0..self.l {
            let mut mean = DVector::zeros(a.nrows());
            for k in 0..self.k {
                mean += a.column(k * self.l + i);
            }
            mean /= self.k as f64;
            for k in 0..self.k {
                out.set_column(k * self.l + i, &mean);
            }
        }
        out
    }
}

/// How the smoothness coupling enters the code problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmoothnessMode {
    /// Enforce `A G = 0` exactly.
    #[default]
    Hard,
    /// Add `weight * sum_c |1^T (A G)_c|`, the total variation of code mass.
    MassPenalty { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmOptions {
    pub rho: f64,
    pub prox_weight: f64,
    pub max_iters: usize,
    pub primal_tol: f64,
    pub dual_tol: f64,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            rho: 1.0,
            prox_weight: 1.0,
            max_iters: 500,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
        }
    }
}

impl AdmmOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.prox_weight > 0.0
            && self.max_iters > 0
            && self.primal_tol > 0.0
            && self.dual_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidHyper(format!("ADMM options must be positive: {self:?}")))
        }
    }
}

/// One column's objective `x^T Q x - 2 q^T x + constant + l1 * ||x||_1`,
/// over the coordinates `support` of an `N`-vector (zero elsewhere).
#[derive(Debug, Clone)]
pub struct ColumnBlock {
    pub support: Range<usize>,
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
    pub l1: f64,
}

impl ColumnBlock {
    /// `||f - D_s x||^2 + l1 ||x||_1` for the sub-dictionary `D_s`.
    pub fn least_squares(sub_dict: &DMatrix<f64>, target: &DVector<f64>, support: Range<usize>, l1: f64) -> Self {
        Self {
            support,
            quad: sub_dict.transpose() * sub_dict,
            lin: sub_dict.transpose() * target,
            constant: target.norm_squared(),
            l1,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let qx = &self.quad * x;
        x.dot(&qx) - 2.0 * self.lin.dot(x) + self.constant + self.l1 * x.lp_norm(1)
    }
}

/// Codes `A` (`N x KL`) with each column's allowed nonzero block.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodeMatrix {
    pub codes: DMatrix<f64>,
    pub supports: Vec<Range<usize>>,
}

impl SparseCodeMatrix {
    pub fn zeros(n_atoms: usize, supports: Vec<Range<usize>>) -> Self {
        Self {
            codes: DMatrix::zeros(n_atoms, supports.len()),
            supports,
        }
    }

    /// Training layout: column `k*L + i` is supported on device `i`'s block.
    pub fn for_dictionary(dict: &Dictionary, windows: usize) -> Self {
        let l = dict.devices();
        let supports = (0..windows * l).map(|j| dict.block_range(j % l)).collect();
        Self::zeros(dict.n_atoms(), supports)
    }

    pub fn n_atoms(&self) -> usize {
        self.codes.nrows()
    }

    pub fn columns(&self) -> usize {
        self.codes.ncols()
    }

    pub fn respects_support(&self) -> bool {
        self.supports.iter().enumerate().all(|(j, s)| {
            (0..self.n_atoms())
                .filter(|r| !s.contains(r))
                .all(|r| self.codes[(r, j)] == 0.0)
        })
    }

    /// Sum of the entries of column `j` (the code mass `1^T a`).
    pub fn mass(&self, j: usize) -> f64 {
        self.codes.column(j).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmIterate {
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Augmented Lagrangian at the end of the iteration.
    pub lagrangian: f64,
    /// Column objectives plus the smoothness penalty (zero in hard mode).
    pub objective: f64,
}

/// Splitting and scaled dual variables, reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub z: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdmmResult {
    pub codes: SparseCodeMatrix,
    pub converged: bool,
    pub iterations: usize,
    pub history: Vec<AdmmIterate>,
    pub state: AdmmState,
}

struct Constraint {
    support: Range<usize>,
    members: Vec<(usize, f64)>,
}

/// Proximal Jacobian ADMM for `min sum_j f_j(a_j) + g(A G - Z)`-style problems:
/// `sum_j f_j(a_j) + h(Z)` subject to `A G = Z`, with `h` the indicator of
/// zero ([`SmoothnessMode::Hard`]) or the mass penalty.
///
/// `g = None` solves the blocks independently (pure proximal-point steps).
/// Non-convergence is reported through `converged`, not as an error.
pub fn pjadmm_solve(
    n_atoms: usize,
    blocks: &[ColumnBlock],
    g: Option<&SmoothnessMatrix>,
    mode: SmoothnessMode,
    opts: &AdmmOptions,
    warm: Option<(&SparseCodeMatrix, Option<&AdmmState>)>,
) -> Result<AdmmResult> {
    opts.validate()?;
    let ncols = blocks.len();
    for (j, b) in blocks.iter().enumerate() {
        let n = b.support.len();
        if b.support.end > n_atoms || b.quad.shape() != (n, n) || b.lin.len() != n {
            return Err(Error::Dimension(format!("column block {j} is inconsistent")));
        }
    }
    if let SmoothnessMode::MassPenalty { weight } = mode {
        if !(weight >= 0.0) {
            return Err(Error::InvalidHyper(format!("smoothness weight {weight} < 0")));
        }
    }

    let constraints: Vec<Constraint> = match g {
        None => Vec::new(),
        Some(g) => {
            if g.dim() != ncols {
                return Err(Error::Dimension(format!(
                    "G is {0}x{0} but there are {ncols} columns",
                    g.dim()
                )));
            }
            g.constraint_columns()
                .into_iter()
                .map(|(_, members)| {
                    let support = blocks[members[0].0].support.clone();
                    if members.iter().any(|&(j, _)| blocks[j].support != support) {
                        return Err(Error::Dimension(
                            "columns coupled by G must share one support block".into(),
                        ));
                    }
                    Ok(Constraint { support, members })
                })
                .collect::<Result<_>>()?
        }
    };
    // constraints touching each column, with the sign of the column in it
    let mut touching: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
    for (c, con) in constraints.iter().enumerate() {
        for &(j, s) in &con.members {
            touching[j].push((c, s));
        }
    }

    let rho = opts.rho;
    let mut x: Vec<DVector<f64>> = match warm {
        Some((codes, _)) => {
            if codes.columns() != ncols || codes.n_atoms() != n_atoms {
                return Err(Error::Dimension("warm-start codes have the wrong shape".into()));
            }
            blocks
                .iter()
                .enumerate()
                .map(|(j, b)| codes.codes.column(j).rows(b.support.start, b.support.len()).into_owned())
                .collect()
        }
        None => blocks.iter().map(|b| DVector::zeros(b.support.len())).collect(),
    };
    let (mut z, mut u) = match warm.and_then(|(_, s)| s) {
        Some(s) if s.z.len() == constraints.len()
            && s.z.iter().zip(&constraints).all(|(v, c)| v.len() == c.support.len()) =>
        {
            (s.z.clone(), s.u.clone())
        }
        _ => (
            constraints.iter().map(|c| DVector::zeros(c.support.len())).collect::<Vec<_>>(),
            constraints.iter().map(|c| DVector::zeros(c.support.len())).collect::<Vec<_>>(),
        ),
    };
    if matches!(mode, SmoothnessMode::Hard) {
        z.iter_mut().for_each(|v| v.fill(0.0));
    }

    let constraint_values = |x: &[DVector<f64>]| -> Vec<DVector<f64>> {
        constraints
            .iter()
            .map(|c| {
                let mut v = DVector::zeros(c.support.len());
                for &(j, s) in &c.members {
                    v.axpy(s, &x[j], 1.0);
                }
                v
            })
            .collect()
    };
    let penalty = |z: &[DVector<f64>]| -> f64 {
        match mode {
            SmoothnessMode::Hard => 0.0,
            SmoothnessMode::MassPenalty { weight } => weight * z.iter().map(|v| v.sum().abs()).sum::<f64>(),
        }
    };

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut ax = constraint_values(&x);

    for it in 0..opts.max_iters {
        iterations = it + 1;
        // residual pieces r_c = (A G)_c - z_c + u_c from the previous sweep
        let shifted: Vec<DVector<f64>> = ax
            .iter()
            .zip(&z)
            .zip(&u)
            .map(|((a, z), u)| a - z + u)
            .collect();

        let x_new: Vec<DVector<f64>> = (0..ncols)
            .into_par_iter()
            .map(|j| {
                let b = &blocks[j];
                let deg = touching[j].len() as f64;
                let tau = opts.prox_weight * rho * deg.max(1.0);
                let diag = (rho * deg + tau) / 2.0;
                let mut h = b.lin.clone();
                h.axpy(tau / 2.0, &x[j], 1.0);
                for &(c, s) in &touching[j] {
                    // w_c = shifted_c - s * x_j; term (rho/2)||s x + w_c||^2
                    let w = &shifted[c] - &x[j] * s;
                    h.axpy(-rho * s / 2.0, &w, 1.0);
                }
                prox_lasso(&b.quad, diag, &h, b.l1, &x[j])
            })
            .collect();

        let ax_new = constraint_values(&x_new);
        let z_new: Vec<DVector<f64>> = match mode {
            SmoothnessMode::Hard => z.clone(),
            SmoothnessMode::MassPenalty { weight } => ax_new
                .iter()
                .zip(&u)
                .map(|(a, u)| prox_mass_l1(&(a + u), weight / rho))
                .collect(),
        };
        let mut primal_sq = 0.0;
        for ((uc, a), zc) in u.iter_mut().zip(&ax_new).zip(&z_new) {
            let r = a - zc;
            primal_sq += r.norm_squared();
            *uc += r;
        }
        let dz: f64 = z_new
            .iter()
            .zip(&z)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        let dx: f64 = x_new
            .iter()
            .zip(&x)
            .enumerate()
            .map(|(j, (a, b))| {
                let tau = opts.prox_weight * rho * (touching[j].len() as f64).max(1.0);
                tau * tau * (a - b).norm_squared()
            })
            .sum::<f64>()
            .sqrt();
        let primal = primal_sq.sqrt();
        let dual = rho * dz + dx;

        x = x_new;
        z = z_new;
        ax = ax_new;

        let objective: f64 = blocks.iter().zip(&x).map(|(b, xj)| b.value(xj)).sum::<f64>() + penalty(&z);
        let lagrangian = objective
            + ax.iter()
                .zip(&z)
                .zip(&u)
                .map(|((a, zc), uc)| {
                    let r = a - zc;
                    rho * uc.dot(&r) + 0.5 * rho * r.norm_squared()
                })
                .sum::<f64>();
        history.push(AdmmIterate {
            primal_residual: primal,
            dual_residual: dual,
            lagrangian,
            objective,
        });
        if !(primal.is_finite() && dual.is_finite()) {
            break;
        }
        if primal <= opts.primal_tol && dual <= opts.dual_tol {
            converged = true;
            break;
        }
    }

    let mut codes = SparseCodeMatrix::zeros(n_atoms, blocks.iter().map(|b| b.support.clone()).collect());
    for (j, (b, xj)) in blocks.iter().zip(&x).enumerate() {
        codes
            .codes
            .column_mut(j)
            .rows_mut(b.support.start, b.support.len())
            .copy_from(xj);
    }
    Ok(AdmmResult {
        codes,
        converged,
        iterations,
        history,
        state: AdmmState { z, u },
    })
}

/// `argmin_x x^T (Q + diag I) x - 2 h^T x + l1 ||x||_1` by coordinate descent.
fn prox_lasso(q: &DMatrix<f64>, diag: f64, h: &DVector<f64>, l1: f64, start: &DVector<f64>) -> DVector<f64> {
    let n = h.len();
    let mut x = start.clone();
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for p in 0..n {
            let hpp = q[(p, p)] + diag;
            let mut acc = h[p];
            for r in 0..n {
                if r != p {
                    acc -= q[(p, r)] * x[r];
                }
            }
            let new = soft_threshold(acc, l1 / 2.0) / hpp;
            max_change = max_change.max((new - x[p]).abs());
            max_abs = max_abs.max(new.abs());
            x[p] = new;
        }
        if max_change <= CD_TOL * max_abs.max(1.0) {
            break;
        }
    }
    x
}

/// `argmin_z t |1^T z| + 1/2 ||z - v||^2`: only the mean of `z` moves.
fn prox_mass_l1(v: &DVector<f64>, t: f64) -> DVector<f64> {
    let n = v.len() as f64;
    let s = v.sum();
    let shift = (soft_threshold(s, t * n) - s) / n;
    v.add_scalar(shift)
}

/// Solves the training codes: for every column `j = k*L + i`,
/// `||F_j - D_i a_j||^2 + l1 ||a_j||_1` on device `i`'s block, coupled by `G`.
pub fn solve_training_codes(
    features: &DMatrix<f64>,
    dict: &Dictionary,
    l1: f64,
    g: &SmoothnessMatrix,
    mode: SmoothnessMode,
    opts: &AdmmOptions,
    warm: Option<(&SparseCodeMatrix, Option<&AdmmState>)>,
) -> Result<AdmmResult> {
    if features.nrows() != dict.d() {
        return Err(Error::Dimension(format!(
            "features have dimension {}, dictionary {}",
            features.nrows(),
            dict.d()
        )));
    }
    let l = dict.devices();
    if features.ncols() != g.dim() || g.devices() != l {
        return Err(Error::Dimension("feature columns must match G".into()));
    }
    let subs: Vec<DMatrix<f64>> = (0..l).map(|i| dict.block(i)).collect();
    let blocks: Vec<ColumnBlock> = (0..features.ncols())
        .map(|j| {
            let i = j % l;
            ColumnBlock::least_squares(&subs[i], &features.column(j).into_owned(), dict.block_range(i), l1)
        })
        .collect();
    pjadmm_solve(dict.n_atoms(), &blocks, Some(g), mode, opts, warm)
}

/// Options for test-time coding, which runs unconstrained proximal steps.
pub fn lasso_options() -> AdmmOptions {
    AdmmOptions {
        max_iters: 20_000,
        primal_tol: 1e-9,
        dual_tol: 1e-9,
        ..AdmmOptions::default()
    }
}

#[derive(Debug, Clone)]
pub struct LassoResult {
    pub code: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// `argmin_a ||feature - D a||^2 + l1 ||a||_1` over the full dictionary.
pub fn lasso_code(feature: &DVector<f64>, dict: &Dictionary, l1: f64, opts: &AdmmOptions) -> Result<LassoResult> {
    if feature.len() != dict.d() {
        return Err(Error::Dimension(format!(
            "feature has dimension {}, dictionary {}",
            feature.len(),
            dict.d()
        )));
    }
    let block = ColumnBlock::least_squares(dict.atoms(), feature, 0..dict.n_atoms(), l1);
    let res = pjadmm_solve(dict.n_atoms(), &[block], None, SmoothnessMode::Hard, opts, None)?;
    Ok(LassoResult {
        code: res.codes.codes.column(0).into_owned(),
        converged: res.converged,
        iterations: res.iterations,
    })
}
