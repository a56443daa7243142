//! Alternating minimization over the autoencoder, the dictionary and the
//! sparse codes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{self, Dictionary, DualAscentOptions};
use crate::error::{Error, Result};
use crate::lstm::{self, LossWeights, LstmAeParams};
use crate::rng::SeedStream;
use crate::signal::{Scaler, WindowedDataset};
use crate::sparse::{self, AdmmOptions, AdmmState, SmoothnessMatrix, SmoothnessMode, SparseCodeMatrix};

/// Slack allowed when checking that an exact block step did not increase
/// its sub-objective.
pub const BLOCK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub omega: usize,
    pub m: usize,
    pub atoms_per_device: usize,
    pub seed: u64,
    pub max_outer_iters: usize,
    pub epochs_per_block: usize,
    /// Reconstruction-only autoencoder epochs before the dictionary is seeded.
    pub pretrain_epochs: usize,
    /// Step-halving budget for the guarded gradient steps.
    pub max_halvings: usize,
    /// Initial step of the dictionary gradient path.
    pub dict_step: f64,
    /// Ridge of the cell-state companion fit used at decode time.
    pub cell_ridge: f64,
    pub smoothness: SmoothnessMode,
    pub admm: AdmmOptions,
    pub dual: DualAscentOptions,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.4,
            lambda3: 1.2,
            lambda4: 0.6,
            eta: 0.01,
            epsilon: 0.05,
            omega: 14,
            m: 7,
            atoms_per_device: 20,
            seed: 0,
            max_outer_iters: 200,
            epochs_per_block: 1,
            pretrain_epochs: 0,
            max_halvings: 20,
            dict_step: 0.5,
            cell_ridge: 1e-6,
            smoothness: SmoothnessMode::Hard,
            admm: AdmmOptions::default(),
            dual: DualAscentOptions::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidHyper(format!("weights must be finite and >= 0: {weights:?}")));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidHyper(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidHyper(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.omega < 2 || self.m == 0 || self.atoms_per_device == 0 {
            return Err(Error::InvalidHyper("omega >= 2, m >= 1 and atoms_per_device >= 1 required".into()));
        }
        if self.max_outer_iters == 0 || self.epochs_per_block == 0 {
            return Err(Error::InvalidHyper("max_outer_iters and epochs_per_block must be >= 1".into()));
        }
        if !(self.dict_step > 0.0 && self.cell_ridge > 0.0) {
            return Err(Error::InvalidHyper("dict_step and cell_ridge must be > 0".into()));
        }
        if let SmoothnessMode::MassPenalty { weight } = self.smoothness {
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(Error::InvalidHyper(format!("smoothness weight must be >= 0, got {weight}")));
            }
        }
        self.admm.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            recon: self.lambda3,
            reg: self.lambda4,
        }
    }
}

/// Terms of the training objective `J = J1 + l2 J2 + l3 J3 + l4 J4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub j4: f64,
    /// `(1/K) sum_i sum_k |1^T a^i(k) - 1^T a^i(k+1)|`
    pub smoothness_residual: f64,
}

impl ObjectiveBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.j, self.j1, self.j2, self.j3, self.j4, self.smoothness_residual]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Sub-objective values around one block step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStep {
    pub before: f64,
    pub after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogEntry {
    pub iter: usize,
    pub objective: ObjectiveBreakdown,
    pub dict_delta: f64,
    pub lstm: BlockStep,
    pub dictionary: BlockStep,
    pub codes: BlockStep,
    pub admm_iterations: usize,
    pub admm_converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Converged,
    MaxIters,
}

/// A trained model. `cell_dictionary` maps codes to encoder cell states and
/// seeds the decoder when only a code is available.
#[derive(Debug, Clone, PartialEq)]
pub struct DtdlModel {
    pub lstm: LstmAeParams,
    pub dictionary: Dictionary,
    pub cell_dictionary: DMatrix<f64>,
    pub scaler: Scaler,
    pub hyper: HyperParams,
    pub device_names: Vec<String>,
    pub training_log: Vec<TrainingLogEntry>,
    pub status: TrainStatus,
}

impl DtdlModel {
    pub fn omega(&self) -> usize {
        self.hyper.omega
    }

    /// Decodes a feature-space vector with the cell state implied by `code`.
    pub fn decode_code(&self, device: usize, code: &DVector<f64>) -> Vec<f64> {
        let r = self.dictionary.block_range(device);
        let feature = self.dictionary.atoms().columns(r.start, r.len()) * code;
        let cell = self.cell_dictionary.columns(r.start, r.len()) * code;
        lstm::decode(&self.lstm, feature.as_slice(), cell.as_slice(), self.omega()).0
    }
}

/// Normalized snippets in training order: index `k * L + i`.
pub fn training_snippets(ds: &WindowedDataset) -> Vec<Vec<f64>> {
    (0..ds.windows())
        .flat_map(|k| (0..ds.devices()).map(move |i| (k, i)))
        .map(|(k, i)| ds.normalized_device(k, i))
        .collect()
}

/// `F_total`: column `k*L + i` is the encoding of device `i`'s snippet in window `k`.
pub fn collect_features(params: &LstmAeParams, ds: &WindowedDataset) -> DMatrix<f64> {
    features_of(params, &training_snippets(ds))
}

fn features_of(params: &LstmAeParams, snippets: &[Vec<f64>]) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = snippets.par_iter().map(|s| lstm::encode_feature(params, s)).collect();
    DMatrix::from_fn(params.m, cols.len(), |r, c| cols[c][r])
}

fn cell_states_of(params: &LstmAeParams, snippets: &[Vec<f64>]) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = snippets.par_iter().map(|s| lstm::encode_state(params, s).1).collect();
    DMatrix::from_fn(params.m, cols.len(), |r, c| cols[c][r])
}

/// Mean over snippets of the autoencoder loss against `targets` (columns of
/// `D A`), plus the regularizer. This is the quantity the autoencoder block
/// must not increase.
pub fn lstm_objective(params: &LstmAeParams, snippets: &[Vec<f64>], targets: &DMatrix<f64>, weights: LossWeights) -> f64 {
    let total: f64 = snippets
        .par_iter()
        .enumerate()
        .map(|(s, y)| {
            let t: Vec<f64> = targets.column(s).iter().copied().collect();
            lstm::snippet_loss(params, y, &t, LossWeights { reg: 0.0, ..weights })
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / snippets.len().max(1) as f64 + 0.5 * weights.reg * params.squared_norm()
}

/// One autoencoder epoch of per-snippet guarded updates in index order.
fn lstm_epoch(
    params: &LstmAeParams,
    snippets: &[Vec<f64>],
    targets: &DMatrix<f64>,
    weights: LossWeights,
    eta: f64,
    max_halvings: usize,
) -> Result<LstmAeParams> {
    let mut p = params.clone();
    for (s, y) in snippets.iter().enumerate() {
        let t: Vec<f64> = targets.column(s).iter().copied().collect();
        p = lstm::guarded_update(&p, y, &t, weights, eta, max_halvings)?.params;
    }
    Ok(p)
}

/// Runs `epochs` epochs; an epoch that raises [`lstm_objective`] is redone
/// at half the learning rate, and dropped once the halving budget is spent.
fn lstm_block(
    params: &LstmAeParams,
    snippets: &[Vec<f64>],
    targets: &DMatrix<f64>,
    weights: LossWeights,
    hp: &HyperParams,
    epochs: usize,
) -> Result<(LstmAeParams, BlockStep)> {
    let start = lstm_objective(params, snippets, targets, weights);
    let mut current = params.clone();
    let mut value = start;
    for _ in 0..epochs {
        let mut eta = hp.eta;
        for _ in 0..=hp.max_halvings {
            let cand = lstm_epoch(&current, snippets, targets, weights, eta, hp.max_halvings)?;
            let v = lstm_objective(&cand, snippets, targets, weights);
            if v.is_finite() && v <= value {
                current = cand;
                value = v;
                break;
            }
            eta /= 2.0;
        }
    }
    Ok((
        current,
        BlockStep {
            before: start,
            after: value,
            accepted: value <= start,
        },
    ))
}

/// Sparse-code sub-objective: fit plus l1 over all columns, plus the mass
/// penalty in penalty mode.
pub fn codes_objective(
    features: &DMatrix<f64>,
    dict: &Dictionary,
    codes: &DMatrix<f64>,
    lambda1: f64,
    mode: SmoothnessMode,
    g: &SmoothnessMatrix,
) -> f64 {
    let fit = (features - dict.atoms() * codes).norm_squared();
    let l1 = lambda1 * codes.iter().map(|v| v.abs()).sum::<f64>();
    let penalty = match mode {
        SmoothnessMode::Hard => 0.0,
        SmoothnessMode::MassPenalty { weight } => {
            weight * g.apply(codes).column_iter().map(|c| c.sum().abs()).sum::<f64>()
        }
    };
    fit + l1 + penalty
}

pub fn smoothness_residual(codes: &DMatrix<f64>, devices: usize) -> f64 {
    let k = codes.ncols() / devices.max(1);
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..devices {
        for w in 0..k.saturating_sub(1) {
            total += (codes.column(w * devices + i).sum() - codes.column((w + 1) * devices + i).sum()).abs();
        }
    }
    total / k as f64
}

/// Evaluates every term of the training objective on `ds` with codes `a`.
pub fn evaluate_objective(
    lstm_params: &LstmAeParams,
    dict: &Dictionary,
    ds: &WindowedDataset,
    codes: &DMatrix<f64>,
    hp: &HyperParams,
) -> ObjectiveBreakdown {
    let snippets = training_snippets(ds);
    let lk = snippets.len().max(1) as f64;
    let passes: Vec<(Vec<f64>, Vec<f64>)> = snippets
        .par_iter()
        .map(|y| {
            let p = lstm::forward(lstm_params, y);
            (p.feature, p.reconstruction)
        })
        .collect();
    let recon = dict.atoms() * codes;
    let mut fit = 0.0;
    let mut rec = 0.0;
    for (s, ((feat, out), y)) in passes.iter().zip(&snippets).enumerate() {
        fit += feat.iter().zip(recon.column(s).iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        rec += out.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let j1 = (fit + hp.lambda1 * codes.iter().map(|v| v.abs()).sum::<f64>()) / lk;
    let j2 = dictionary::incoherence_value(dict);
    let j3 = rec / lk;
    let j4 = lstm_params.squared_norm();
    ObjectiveBreakdown {
        j: j1 + hp.lambda2 * j2 + hp.lambda3 * j3 + hp.lambda4 * j4,
        j1,
        j2,
        j3,
        j4,
        smoothness_residual: smoothness_residual(codes, ds.devices()),
    }
}

struct CodeState {
    codes: SparseCodeMatrix,
    admm: Option<AdmmState>,
}

/// Solves the codes block and keeps the result only if it does not raise
/// [`codes_objective`]. In hard mode an unconverged solution is first
/// projected onto `A G = 0`.
fn codes_block(
    features: &DMatrix<f64>,
    dict: &Dictionary,
    g: &SmoothnessMatrix,
    hp: &HyperParams,
    prev: Option<&CodeState>,
) -> Result<(CodeState, BlockStep, usize, bool)> {
    let warm = prev.map(|p| (&p.codes, p.admm.as_ref()));
    let res = sparse::solve_training_codes(features, dict, hp.lambda1, g, hp.smoothness, &hp.admm, warm)?;
    let mut codes = res.codes;
    if matches!(hp.smoothness, SmoothnessMode::Hard) && !res.converged {
        codes.codes = g.project_feasible(&codes.codes);
    }
    if !codes.codes.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { block: "sparse codes", iter: 0 });
    }
    let after = codes_objective(features, dict, &codes.codes, hp.lambda1, hp.smoothness, g);
    let (iters, converged) = (res.iterations, res.converged);
    match prev {
        Some(p) => {
            let before = codes_objective(features, dict, &p.codes.codes, hp.lambda1, hp.smoothness, g);
            if after <= before + BLOCK_TOL * before.abs().max(1.0) {
                Ok((
                    CodeState { codes, admm: Some(res.state) },
                    BlockStep { before, after, accepted: true },
                    iters,
                    converged,
                ))
            } else {
                Ok((
                    CodeState {
                        codes: p.codes.clone(),
                        admm: p.admm.clone(),
                    },
                    BlockStep { before, after: before, accepted: false },
                    iters,
                    converged,
                ))
            }
        }
        None => Ok((
            CodeState { codes, admm: Some(res.state) },
            BlockStep { before: after, after, accepted: true },
            iters,
            converged,
        )),
    }
}

/// Dictionary block: dual ascent on the closed form when `lambda2 == 0`,
/// a guarded projected gradient step otherwise.
fn dictionary_block(
    dict: &Dictionary,
    features: &DMatrix<f64>,
    codes: &DMatrix<f64>,
    hp: &HyperParams,
) -> Result<(Dictionary, BlockStep)> {
    let before = dictionary::dictionary_objective(dict, features, codes, hp.lambda2);
    if hp.lambda2 == 0.0 {
        let res = dictionary::dual_ascent(features, codes, &hp.dual, None)?;
        let cand = dict.with_atoms(res.atoms)?;
        let after = dictionary::dictionary_objective(&cand, features, codes, 0.0);
        if after <= before + BLOCK_TOL * before.abs().max(1.0) {
            return Ok((cand, BlockStep { before, after, accepted: true }));
        }
        Ok((dict.clone(), BlockStep { before, after: before, accepted: false }))
    } else {
        let step = dictionary::incoherence_grad_step(dict, features, codes, hp.lambda2, hp.dict_step)?;
        let accepted = step.halvings <= 20;
        Ok((
            step.dict,
            BlockStep {
                before,
                after: step.objective_after,
                accepted,
            },
        ))
    }
}

/// `C = S A^T (A A^T + ridge I)^{-1}`: the least-squares map from codes to
/// encoder cell states.
pub fn fit_cell_dictionary(cells: &DMatrix<f64>, codes: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let n = codes.nrows();
    let mut gram = codes * codes.transpose();
    for j in 0..n {
        gram[(j, j)] += ridge;
    }
    let chol = gram.cholesky().ok_or(Error::Singular)?;
    Ok(chol.solve(&(codes * cells.transpose())).transpose())
}

fn check_finite(ok: bool, block: &'static str, iter: usize) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite { block, iter })
    }
}

/// Full training run on `ds` (normalized with `ds.scaler`).
pub fn train(ds: &WindowedDataset, hp: &HyperParams) -> Result<DtdlModel> {
    hp.validate()?;
    if ds.windows() < 2 {
        return Err(Error::TooShort {
            len: ds.windows() * ds.omega(),
            omega: ds.omega(),
        });
    }
    if ds.omega() != hp.omega {
        return Err(Error::InvalidHyper(format!(
            "dataset windows have omega {} but hyperparameters say {}",
            ds.omega(),
            hp.omega
        )));
    }
    let seeds = SeedStream::new(hp.seed);
    let weights = hp.loss_weights();
    let snippets = training_snippets(ds);
    let l = ds.devices();
    let g = sparse::build_g(ds.windows(), l);

    let mut params = LstmAeParams::init(hp.m, &mut seeds.rng("lstm/init"));
    if hp.pretrain_epochs > 0 {
        // the encoder target is the current encoding, so only reconstruction
        // and the regularizer pull on the parameters
        for _ in 0..hp.pretrain_epochs {
            let own = features_of(&params, &snippets);
            params = lstm_block(&params, &snippets, &own, weights, hp, 1)?.0;
        }
        check_finite(params.is_finite(), "autoencoder pretraining", 0)?;
    }
    let mut features = features_of(&params, &snippets);
    let mut dict = Dictionary::init_from_features(&features, l, hp.atoms_per_device, &mut seeds.rng("dictionary/init"))?;
    let (mut codes, _, _, _) = codes_block(&features, &dict, &g, hp, None)?;

    let mut log = Vec::new();
    let mut status = TrainStatus::MaxIters;
    for iter in 1..=hp.max_outer_iters {
        let targets = dict.atoms() * &codes.codes.codes;
        let (new_params, lstm_step) = lstm_block(&params, &snippets, &targets, weights, hp, hp.epochs_per_block)?;
        check_finite(new_params.is_finite() && lstm_step.after.is_finite(), "autoencoder", iter)?;
        params = new_params;
        features = features_of(&params, &snippets);

        let (new_dict, dict_step) = dictionary_block(&dict, &features, &codes.codes.codes, hp)?;
        check_finite(new_dict.atoms().iter().all(|v| v.is_finite()), "dictionary", iter)?;
        let dict_delta = new_dict.mean_abs_change(&dict);
        dict = new_dict;

        let (new_codes, codes_step, admm_iterations, admm_converged) = codes_block(&features, &dict, &g, hp, Some(&codes))
            .map_err(|e| match e {
                Error::NonFinite { block, .. } => Error::NonFinite { block, iter },
                other => other,
            })?;
        codes = new_codes;

        let objective = evaluate_objective(&params, &dict, ds, &codes.codes.codes, hp);
        check_finite(objective.is_finite(), "objective", iter)?;
        log.push(TrainingLogEntry {
            iter,
            objective,
            dict_delta,
            lstm: lstm_step,
            dictionary: dict_step,
            codes: codes_step,
            admm_iterations,
            admm_converged,
        });
        if dict_delta < hp.epsilon {
            status = TrainStatus::Converged;
            break;
        }
    }

    let cells = cell_states_of(&params, &snippets);
    let cell_dictionary = fit_cell_dictionary(&cells, &codes.codes.codes, hp.cell_ridge)?;
    Ok(DtdlModel {
        lstm: params,
        dictionary: dict,
        cell_dictionary,
        scaler: ds.scaler,
        hyper: hp.clone(),
        device_names: ds.device_names().to_vec(),
        training_log: log,
        status,
    })
}
