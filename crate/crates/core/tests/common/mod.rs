#![allow(dead_code)]

use ndarray::{Array1, Array2};
use plrlab::trainer::{loss_and_grads, ModelParams};
use plrlab::types::{clamp_prior, CandidateMatrix, ClassPrior, PredictionMatrix, PseudoLabelMatrix};
use plrlab::Rng;

pub fn random_predictions(rng: &mut Rng, n: usize, c: usize, scale: f64) -> PredictionMatrix {
    let z = Array2::from_shape_fn((n, c), |_| scale * rng.normal());
    PredictionMatrix::from_logits(z.view()).unwrap()
}

/// Each row keeps every class with probability `p`, and at least one class.
pub fn random_candidates(rng: &mut Rng, n: usize, c: usize, p: f64) -> CandidateMatrix {
    let mut bits = Array2::from_elem((n, c), false);
    for i in 0..n {
        let anchor = rng.below(c);
        for j in 0..c {
            bits[[i, j]] = j == anchor || rng.bernoulli(p);
        }
    }
    CandidateMatrix::new(bits).unwrap()
}

pub fn random_prior(rng: &mut Rng, c: usize) -> ClassPrior {
    let raw: Vec<f64> = (0..c).map(|_| 0.02 + rng.uniform()).collect();
    clamp_prior(&raw).unwrap()
}

/// Row objective `sum_j -w ln f + (1/lambda) w ln w + (M/lambda) w ln r`,
/// written out independently of the library.
pub fn row_objective(w: &[f64], f: &[f64], r: &[f64], lambda: f64, m: f64) -> f64 {
    w.iter()
        .zip(f)
        .zip(r)
        .map(|((&wj, &fj), &rj)| {
            let ent = if wj > 0.0 { wj * wj.ln() } else { 0.0 };
            -wj * fj.ln() + ent / lambda + m / lambda * wj * rj.ln()
        })
        .sum()
}

/// Minimum of the row objective over the simplex grid with spacing
/// `1/steps`, restricted to the candidate classes.
pub fn grid_min(f: &[f64], support: &[usize], r: &[f64], lambda: f64, m: f64, steps: usize) -> f64 {
    // table[k][t]: contribution of candidate k holding mass t/steps
    let table: Vec<Vec<f64>> = support
        .iter()
        .map(|&j| {
            (0..=steps)
                .map(|t| {
                    let w = t as f64 / steps as f64;
                    let ent = if w > 0.0 { w * w.ln() } else { 0.0 };
                    -w * f[j].ln() + ent / lambda + m / lambda * w * r[j].ln()
                })
                .collect()
        })
        .collect();
    fn rec(table: &[Vec<f64>], k: usize, left: usize, acc: f64, best: &mut f64) {
        if k + 1 == table.len() {
            let v = acc + table[k][left];
            if v < *best {
                *best = v;
            }
            return;
        }
        for t in 0..=left {
            rec(table, k + 1, left - t, acc + table[k][t], best);
        }
    }
    let mut best = f64::INFINITY;
    rec(&table, 0, steps, 0.0, &mut best);
    best
}

/// Largest relative error between backprop and central differences of the
/// mean soft cross-entropy over every parameter.
pub fn max_gradient_error(params: &ModelParams, x: &Array2<f64>, w: &PseudoLabelMatrix, h: f64) -> f64 {
    let (_, grads) = loss_and_grads(params, x.view(), w).unwrap();
    let loss_at = |p: &ModelParams| loss_and_grads(p, x.view(), w).unwrap().0;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    for (l, g) in grads.iter().enumerate() {
        let (rows, cols) = g.weights.dim();
        for a in 0..rows {
            for b in 0..cols {
                let mut up = params.clone();
                up.layers_mut()[l].weights[[a, b]] += h;
                let mut dn = params.clone();
                dn.layers_mut()[l].weights[[a, b]] -= h;
                check(g.weights[[a, b]], (loss_at(&up) - loss_at(&dn)) / (2.0 * h));
            }
        }
        for a in 0..g.bias.len() {
            let mut up = params.clone();
            up.layers_mut()[l].bias[a] += h;
            let mut dn = params.clone();
            dn.layers_mut()[l].bias[a] -= h;
            check(g.bias[a], (loss_at(&up) - loss_at(&dn)) / (2.0 * h));
        }
    }
    worst
}

/// Random row-stochastic matrix with full support.
pub fn random_soft_labels(rng: &mut Rng, n: usize, c: usize) -> PseudoLabelMatrix {
    let raw = Array2::from_shape_fn((n, c), |_| 0.05 + rng.uniform());
    let sums: Array1<f64> = raw.sum_axis(ndarray::Axis(1));
    let mut w = raw;
    for (mut row, s) in w.outer_iter_mut().zip(sums.iter()) {
        row.mapv_inplace(|v| v / s);
    }
    PseudoLabelMatrix::new(w).unwrap()
}
