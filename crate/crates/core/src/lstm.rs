//! Single-layer LSTM auto-encoder unrolled for `2 * omega` steps.
//!
//! Steps `1..=omega` consume the snippet and their final output `h_omega` is
//! the feature vector (the encoder). Steps `omega+1..=2*omega` run with zero
//! input from the carried-over `(h, S)` state and emit one scalar per step
//! through a linear readout (the decoder).
//!
//! Gate blocks are stacked in the fixed order `(a, i, f, o)` in `w`, `u` and
//! `b`: entry `g * m + r` is row `r` of gate block `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GATE_A: usize = 0;
pub const GATE_I: usize = 1;
pub const GATE_F: usize = 2;
pub const GATE_O: usize = 3;
pub const GATE_ORDER: [&str; 4] = ["a", "i", "f", "o"];

const INIT_RANGE: f64 = 0.1;
const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmAeParams {
    pub m: usize,
    /// `4m x 1` input weights.
    pub w: Vec<f64>,
    /// `4m x m` recurrent weights, row-major.
    pub u: Vec<f64>,
    /// `4m` biases.
    pub b: Vec<f64>,
    pub readout_v: Vec<f64>,
    pub readout_c: f64,
}

impl LstmAeParams {
    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            w: vec![0.0; 4 * m],
            u: vec![0.0; 4 * m * m],
            b: vec![0.0; 4 * m],
            readout_v: vec![0.0; m],
            readout_c: 0.0,
        }
    }

    /// Weights uniform in `[-0.1, 0.1]`, forget-gate biases `+1`, other biases 0.
    pub fn init<R: Rng>(m: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(m);
        let mut draw = |v: &mut [f64]| {
            for x in v {
                *x = rng.random_range(-INIT_RANGE..=INIT_RANGE);
            }
        };
        draw(&mut p.w);
        draw(&mut p.u);
        draw(&mut p.readout_v);
        p.b[GATE_F * m..(GATE_F + 1) * m].fill(FORGET_BIAS_INIT);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.flat_iter().all(f64::is_finite) && self.readout_c.is_finite()
    }

    /// Squared norm of every trainable parameter, readout included.
    pub fn squared_norm(&self) -> f64 {
        self.flat_iter().map(|x| x * x).sum::<f64>() + self.readout_c * self.readout_c
    }

    fn flat_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w
            .iter()
            .chain(&self.u)
            .chain(&self.b)
            .chain(&self.readout_v)
            .copied()
    }

    /// Number of scalar parameters in `flatten`.
    pub fn len(&self) -> usize {
        4 * self.m + 4 * self.m * self.m + 4 * self.m + self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Concatenation `w | u | b | readout_v | readout_c`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.flat_iter().collect();
        out.push(self.readout_c);
        out
    }

    pub fn unflatten(m: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(m);
        if flat.len() != p.len() {
            return Err(Error::Dimension(format!(
                "expected {} LSTM parameters for m = {m}, got {}",
                p.len(),
                flat.len()
            )));
        }
        let (w, rest) = flat.split_at(4 * m);
        let (u, rest) = rest.split_at(4 * m * m);
        let (b, rest) = rest.split_at(4 * m);
        let (v, c) = rest.split_at(m);
        p.w.copy_from_slice(w);
        p.u.copy_from_slice(u);
        p.b.copy_from_slice(b);
        p.readout_v.copy_from_slice(v);
        p.readout_c = c[0];
        Ok(p)
    }

    pub fn readout(&self, h: &[f64]) -> f64 {
        dot(&self.readout_v, h) + self.readout_c
    }
}

/// Everything one step of the recurrence needs to be differentiated later.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub x: f64,
    /// `4m` activations `(a, i, f, o)`.
    pub gates: Vec<f64>,
    pub s: Vec<f64>,
    pub h: Vec<f64>,
}

/// Records for steps `l = 1..`, in order. `S_0 = h_0 = 0` are implicit for a
/// full tape; a decoder-only tape starts from `initial_h`/`initial_s`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTape {
    pub initial_h: Vec<f64>,
    pub initial_s: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

impl ForwardTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn h_before(&self, idx: usize) -> &[f64] {
        if idx == 0 {
            &self.initial_h
        } else {
            &self.steps[idx - 1].h
        }
    }

    fn s_before(&self, idx: usize) -> &[f64] {
        if idx == 0 {
            &self.initial_s
        } else {
            &self.steps[idx - 1].s
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub dw: Vec<f64>,
    pub du: Vec<f64>,
    pub db: Vec<f64>,
    pub d_readout_v: Vec<f64>,
    pub d_readout_c: f64,
}

impl ParamGradients {
    pub fn zeros(m: usize) -> Self {
        Self {
            dw: vec![0.0; 4 * m],
            du: vec![0.0; 4 * m * m],
            db: vec![0.0; 4 * m],
            d_readout_v: vec![0.0; m],
            d_readout_c: 0.0,
        }
    }

    /// Same layout as [`LstmAeParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dw.len() * 2 + self.du.len() + self.d_readout_v.len() + 1);
        out.extend(&self.dw);
        out.extend(&self.du);
        out.extend(&self.db);
        out.extend(&self.d_readout_v);
        out.push(self.d_readout_c);
        out
    }
}

/// Weights of the per-snippet loss
/// `||h_omega - target||^2 + recon * sum_l (r_l - y_l)^2 + (reg / 2) * ||theta||^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub reg: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One step of the LSTM recurrence.
pub fn lstm_step(params: &LstmAeParams, x: f64, h_prev: &[f64], s_prev: &[f64]) -> StepRecord {
    let m = params.m;
    let mut gates = vec![0.0; 4 * m];
    for (row, g) in gates.iter_mut().enumerate() {
        let pre = params.w[row] * x
            + dot(&params.u[row * m..(row + 1) * m], h_prev)
            + params.b[row];
        *g = if row < m { pre.tanh() } else { sigmoid(pre) };
    }
    let mut s = vec![0.0; m];
    let mut h = vec![0.0; m];
    for r in 0..m {
        let (a, i, f, o) = (gates[r], gates[m + r], gates[2 * m + r], gates[3 * m + r]);
        s[r] = f * s_prev[r] + i * a;
        h[r] = o * s[r].tanh();
    }
    StepRecord { x, gates, s, h }
}

/// Runs the encoder half; returns `h_omega` and the tape of steps `1..=omega`.
pub fn encode(params: &LstmAeParams, snippet: &[f64]) -> (Vec<f64>, ForwardTape) {
    let m = params.m;
    let mut tape = ForwardTape {
        initial_h: vec![0.0; m],
        initial_s: vec![0.0; m],
        steps: Vec::with_capacity(2 * snippet.len()),
    };
    let mut h = vec![0.0; m];
    let mut s = vec![0.0; m];
    for &x in snippet {
        let rec = lstm_step(params, x, &h, &s);
        h.clone_from(&rec.h);
        s.clone_from(&rec.s);
        tape.steps.push(rec);
    }
    (h, tape)
}

/// Feature only, without keeping the tape.
pub fn encode_feature(params: &LstmAeParams, snippet: &[f64]) -> Vec<f64> {
    encode_state(params, snippet).0
}

/// Final `(h_omega, S_omega)` of the encoder.
pub fn encode_state(params: &LstmAeParams, snippet: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = params.m;
    let mut h = vec![0.0; m];
    let mut s = vec![0.0; m];
    for &x in snippet {
        let rec = lstm_step(params, x, &h, &s);
        h = rec.h;
        s = rec.s;
    }
    (h, s)
}

/// Runs `omega` decoder steps with zero input from state `(feature, cell)`.
pub fn decode(params: &LstmAeParams, feature: &[f64], cell: &[f64], omega: usize) -> (Vec<f64>, ForwardTape) {
    let mut tape = ForwardTape {
        initial_h: feature.to_vec(),
        initial_s: cell.to_vec(),
        steps: Vec::with_capacity(omega),
    };
    let mut out = Vec::with_capacity(omega);
    let mut h = feature.to_vec();
    let mut s = cell.to_vec();
    for _ in 0..omega {
        let rec = lstm_step(params, 0.0, &h, &s);
        out.push(params.readout(&rec.h));
        h.clone_from(&rec.h);
        s.clone_from(&rec.s);
        tape.steps.push(rec);
    }
    (out, tape)
}

/// Full encoder/decoder pass over one snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderPass {
    pub feature: Vec<f64>,
    pub reconstruction: Vec<f64>,
    /// All `2 * omega` steps.
    pub tape: ForwardTape,
}

pub fn forward(params: &LstmAeParams, snippet: &[f64]) -> AutoencoderPass {
    let omega = snippet.len();
    let (feature, mut tape) = encode(params, snippet);
    let cell = tape.steps.last().map_or_else(|| vec![0.0; params.m], |r| r.s.clone());
    let (reconstruction, dec) = decode(params, &feature, &cell, omega);
    tape.steps.extend(dec.steps);
    AutoencoderPass {
        feature,
        reconstruction,
        tape,
    }
}

/// Per-snippet loss the gradients of [`backward`] belong to.
pub fn snippet_loss(params: &LstmAeParams, snippet: &[f64], encoder_target: &[f64], weights: LossWeights) -> f64 {
    let pass = forward(params, snippet);
    let enc: f64 = pass
        .feature
        .iter()
        .zip(encoder_target)
        .map(|(h, t)| (h - t).powi(2))
        .sum();
    let rec: f64 = pass
        .reconstruction
        .iter()
        .zip(snippet)
        .map(|(r, y)| (r - y).powi(2))
        .sum();
    enc + weights.recon * rec + 0.5 * weights.reg * params.squared_norm()
}

/// Backpropagation through time over a full `2 * omega` tape.
///
/// The encoder output receives `2 (h_omega - encoder_target)`; every decoder
/// step receives `2 * recon * (r_l - y_{l-omega})` through the readout. The
/// regularizer contributes `reg * theta` to every parameter.
pub fn backward(
    params: &LstmAeParams,
    tape: &ForwardTape,
    encoder_target: &[f64],
    recon_target: &[f64],
    weights: LossWeights,
) -> Result<ParamGradients> {
    let m = params.m;
    let omega = recon_target.len();
    if tape.len() != 2 * omega {
        return Err(Error::Dimension(format!(
            "tape has {} steps, expected {}",
            tape.len(),
            2 * omega
        )));
    }
    if encoder_target.len() != m {
        return Err(Error::Dimension(format!(
            "encoder target has length {}, expected {m}",
            encoder_target.len()
        )));
    }

    let mut grads = ParamGradients::zeros(m);
    let mut dh_next = vec![0.0; m]; // Delta h_l carried from step l+1
    let mut ds_next = vec![0.0; m]; // delta S_{l+1}
    let mut f_next = vec![0.0; m]; // f_{l+1}
    let mut dgates = vec![0.0; 4 * m];
    let mut dh = vec![0.0; m];

    for idx in (0..2 * omega).rev() {
        let l = idx + 1;
        let rec = &tape.steps[idx];
        let s_prev = tape.s_before(idx);
        let h_prev = tape.h_before(idx);

        dh.copy_from_slice(&dh_next);
        if l == omega {
            for r in 0..m {
                dh[r] += 2.0 * (rec.h[r] - encoder_target[r]);
            }
        } else if l > omega {
            let out = params.readout(&rec.h);
            let g = 2.0 * weights.recon * (out - recon_target[l - omega - 1]);
            for r in 0..m {
                dh[r] += g * params.readout_v[r];
                grads.d_readout_v[r] += g * rec.h[r];
            }
            grads.d_readout_c += g;
        }

        for r in 0..m {
            let (a, i, f, o) = (
                rec.gates[r],
                rec.gates[m + r],
                rec.gates[2 * m + r],
                rec.gates[3 * m + r],
            );
            let tanh_s = rec.s[r].tanh();
            let ds = dh[r] * o * (1.0 - tanh_s * tanh_s) + ds_next[r] * f_next[r];
            dgates[r] = ds * i * (1.0 - a * a);
            dgates[m + r] = ds * a * i * (1.0 - i);
            dgates[2 * m + r] = ds * s_prev[r] * f * (1.0 - f);
            dgates[3 * m + r] = dh[r] * tanh_s * o * (1.0 - o);
            ds_next[r] = ds;
            f_next[r] = f;
        }

        dh_next.fill(0.0);
        for (row, &dg) in dgates.iter().enumerate() {
            grads.dw[row] += dg * rec.x;
            grads.db[row] += dg;
            let u_row = &params.u[row * m..(row + 1) * m];
            let du_row = &mut grads.du[row * m..(row + 1) * m];
            for c in 0..m {
                du_row[c] += dg * h_prev[c];
                dh_next[c] += u_row[c] * dg;
            }
        }
    }

    let reg = weights.reg;
    for (g, p) in grads.dw.iter_mut().zip(&params.w) {
        *g += reg * p;
    }
    for (g, p) in grads.du.iter_mut().zip(&params.u) {
        *g += reg * p;
    }
    for (g, p) in grads.db.iter_mut().zip(&params.b) {
        *g += reg * p;
    }
    for (g, p) in grads.d_readout_v.iter_mut().zip(&params.readout_v) {
        *g += reg * p;
    }
    grads.d_readout_c += reg * params.readout_c;
    Ok(grads)
}

/// Plain gradient step `theta <- theta - eta * grad`.
pub fn apply_update(params: &LstmAeParams, grads: &ParamGradients, eta: f64) -> LstmAeParams {
    let step = |p: &[f64], g: &[f64]| -> Vec<f64> { p.iter().zip(g).map(|(p, g)| p - eta * g).collect() };
    LstmAeParams {
        m: params.m,
        w: step(&params.w, &grads.dw),
        u: step(&params.u, &grads.du),
        b: step(&params.b, &grads.db),
        readout_v: step(&params.readout_v, &grads.d_readout_v),
        readout_c: params.readout_c - eta * grads.d_readout_c,
    }
}

/// Result of one guarded update on a single snippet.
#[derive(Debug, Clone)]
pub struct GuardedStep {
    pub params: LstmAeParams,
    pub loss_before: f64,
    pub loss_after: f64,
    pub halvings: usize,
}

/// Gradient step on one snippet, halving `eta` up to `max_halvings` times
/// until the snippet loss does not increase. Keeps the old parameters if no
/// step size works.
pub fn guarded_update(
    params: &LstmAeParams,
    snippet: &[f64],
    encoder_target: &[f64],
    weights: LossWeights,
    eta: f64,
    max_halvings: usize,
) -> Result<GuardedStep> {
    let pass = forward(params, snippet);
    let grads = backward(params, &pass.tape, encoder_target, snippet, weights)?;
    let loss_before = snippet_loss(params, snippet, encoder_target, weights);
    let mut step = eta;
    for halvings in 0..=max_halvings {
        let candidate = apply_update(params, &grads, step);
        let loss_after = snippet_loss(&candidate, snippet, encoder_target, weights);
        if loss_after <= loss_before && candidate.is_finite() {
            return Ok(GuardedStep {
                params: candidate,
                loss_before,
                loss_after,
                halvings,
            });
        }
        step *= 0.5;
    }
    Ok(GuardedStep {
        params: params.clone(),
        loss_before,
        loss_after: loss_before,
        halvings: max_halvings,
    })
}
