//! Independent oracles shared by the integration tests. Nothing here calls
//! into the numerical code it is used to check.
#![allow(dead_code)]

use dtdl::lstm::LstmAeParams;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Row-major `rows x cols` matrix as nested vectors.
pub type Mat = Vec<Vec<f64>>;

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `D = F A^T (A A^T + LK diag(phi) + 1e-10 I)^{-1}`, one row at a time.
pub fn normal_equation_d(f: &Mat, a: &Mat, phi: &[f64]) -> Mat {
    let lk = f[0].len() as f64;
    let mut gram = mat_mul(a, &transpose(a));
    for (j, row) in gram.iter_mut().enumerate() {
        row[j] += lk * phi[j] + 1e-10;
    }
    let rhs = mat_mul(f, &transpose(a));
    rhs.into_iter().map(|r| gauss_solve(gram.clone(), r)).collect()
}

/// `(1/LK) ||F - D A||^2 + lambda2 sum_{i != j} ||D_i^T D_j||^2` with `D`
/// split into consecutive column blocks of the given sizes.
pub fn dictionary_objective(d: &Mat, f: &Mat, a: &Mat, blocks: &[usize], lambda2: f64) -> f64 {
    let lk = f[0].len() as f64;
    let da = mat_mul(d, a);
    let fit: f64 = f
        .iter()
        .zip(&da)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)))
        .sum();
    let mut starts = vec![0];
    for b in blocks {
        starts.push(starts.last().unwrap() + b);
    }
    let mut inc = 0.0;
    for bi in 0..blocks.len() {
        for bj in 0..blocks.len() {
            if bi == bj {
                continue;
            }
            for p in starts[bi]..starts[bi + 1] {
                for q in starts[bj]..starts[bj + 1] {
                    let dot: f64 = d.iter().map(|row| row[p] * row[q]).sum();
                    inc += dot * dot;
                }
            }
        }
    }
    fit / lk + lambda2 * inc
}

pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            p[j] = x[j] + h;
            let up = f(&p);
            p[j] = x[j] - h;
            let down = f(&p);
            p[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Loop-level autoencoder loss over one snippet, with the parameters given
/// as the flat vector `w | u | b | v | c`.
pub fn lstm_loss(m: usize, theta: &[f64], y: &[f64], target: &[f64], recon: f64, reg: f64) -> f64 {
    let w = &theta[..4 * m];
    let u = &theta[4 * m..4 * m + 4 * m * m];
    let b = &theta[4 * m + 4 * m * m..8 * m + 4 * m * m];
    let v = &theta[8 * m + 4 * m * m..9 * m + 4 * m * m];
    let c = theta[9 * m + 4 * m * m];
    let mut h = vec![0.0; m];
    let mut s = vec![0.0; m];
    let step = |x: f64, h: &mut Vec<f64>, s: &mut Vec<f64>| {
        let pre = |gate: usize, r: usize| {
            let row = gate * m + r;
            w[row] * x + (0..m).map(|q| u[row * m + q] * h[q]).sum::<f64>() + b[row]
        };
        let mut nh = vec![0.0; m];
        for r in 0..m {
            let a = pre(0, r).tanh();
            let i = sig(pre(1, r));
            let f = sig(pre(2, r));
            let o = sig(pre(3, r));
            s[r] = f * s[r] + i * a;
            nh[r] = o * s[r].tanh();
        }
        *h = nh;
    };
    for &x in y {
        step(x, &mut h, &mut s);
    }
    let enc: f64 = h.iter().zip(target).map(|(p, q)| (p - q).powi(2)).sum();
    let mut rec = 0.0;
    for &yl in y {
        step(0.0, &mut h, &mut s);
        let r: f64 = v.iter().zip(&h).map(|(p, q)| p * q).sum::<f64>() + c;
        rec += (r - yl).powi(2);
    }
    let norm: f64 = theta.iter().map(|t| t * t).sum();
    enc + recon * rec + 0.5 * reg * norm
}

pub fn random_params(m: usize, scale: f64, rng: &mut impl rand::Rng) -> LstmAeParams {
    let n = LstmAeParams::zeros(m).len();
    let flat: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    LstmAeParams::unflatten(m, &flat).unwrap()
}

/// Minimizes a convex function of one variable on `[lo, hi]`: a uniform grid
/// of `n` points, then golden-section search in the best cell.
pub fn grid_min(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let best = (0..n)
        .map(|i| lo + h * i as f64)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let (mut a, mut b) = ((best - h).max(lo), (best + h).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if f(x1) < f(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let x = (a + b) / 2.0;
    (x, f(x))
}

/// Minimum of `sum_k ||f_k - D a||^2 + l1 ||a||_1` over one code `a` shared
/// by every window (the hard smoothness constraint makes consecutive code
/// vectors equal). One or two atoms; two atoms use nested grid searches.
pub fn chain_grid_oracle(atoms: &[Vec<f64>], features: &[Vec<f64>], l1: f64, radius: f64) -> f64 {
    let cost = |a: &[f64]| -> f64 {
        features
            .iter()
            .map(|f| {
                let fit: f64 = (0..f.len())
                    .map(|r| (f[r] - atoms.iter().zip(a).map(|(at, c)| at[r] * c).sum::<f64>()).powi(2))
                    .sum();
                fit + l1 * a.iter().map(|v| v.abs()).sum::<f64>()
            })
            .sum()
    };
    match atoms.len() {
        1 => grid_min(-radius, radius, 2001, |x| cost(&[x])).1,
        2 => grid_min(-radius, radius, 401, |x| grid_min(-radius, radius, 401, |y| cost(&[x, y])).1).1,
        _ => panic!("oracle handles one or two atoms"),
    }
}

/// Exhaustive binary coding with at most one atom per device.
pub fn cdl_exhaustive(y: &[f64], blocks: &[Vec<Vec<f64>>], lambda1: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; blocks.len()];
    loop {
        let mut r = y.to_vec();
        let mut active = 0;
        for (dev, &c) in choice.iter().enumerate() {
            if c > 0 {
                active += 1;
                for (x, a) in r.iter_mut().zip(&blocks[dev][c - 1]) {
                    *x -= a;
                }
            }
        }
        best = best.min(r.iter().map(|v| v * v).sum::<f64>() + lambda1 * active as f64);
        let mut pos = 0;
        loop {
            if pos == choice.len() {
                return best;
            }
            choice[pos] += 1;
            if choice[pos] <= blocks[pos].len() {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}
