//! Closed-form pseudo-label regularization.
//!
//! For each sample the pseudo label minimizes, over the simplex restricted to
//! its candidate set,
//!
//! ```text
//!   sum_j  -w_j ln f_j  +  (1/lambda) w_j ln w_j  +  (M/lambda) w_j ln r_j
//! ```
//!
//! The objective is strictly convex on the support, and the unique minimizer
//! is `w_j ∝ S_j f_j^lambda r_j^-M`. With `M = 0` (or a uniform prior) and
//! `lambda = 1` this is PRODEN's masked renormalization.
//!
//! Rows are independent; the batch shape is only a convenience.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1};

use crate::error::{Error, Result};
use crate::types::{
    xlogx, CandidateMatrix, ClassPrior, PlrHyperparams, PredictionMatrix, PseudoLabelMatrix,
    PROB_EPS,
};

/// The three terms of the regularized objective, summed over all entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlrObjectiveBreakdown {
    /// `sum -w ln f`
    pub classification: f64,
    /// `(1/lambda) sum w ln w`
    pub entropy: f64,
    /// `(M/lambda) sum w ln r`
    pub prior_penalty: f64,
    pub total: f64,
}

/// First-order optimality diagnostics for a candidate pseudo-label matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct KktReport {
    pub max_stationarity_residual: f64,
    pub max_row_sum_violation: f64,
    pub max_support_violation: f64,
    /// Per-sample multiplier of the row-sum constraint, recovered from the
    /// normalizer of the closed form. Equality multipliers carry no sign
    /// constraint, so these may be negative.
    pub multipliers: Array1<f64>,
}

fn check_shapes(f: &PredictionMatrix, s: &CandidateMatrix, r: &ClassPrior) -> Result<()> {
    if f.n_samples() != s.n_samples() || f.n_classes() != s.n_classes() {
        return Err(Error::shape(format!(
            "predictions {}x{} vs candidates {}x{}",
            f.n_samples(),
            f.n_classes(),
            s.n_samples(),
            s.n_classes()
        )));
    }
    if r.len() != f.n_classes() {
        return Err(Error::shape(format!(
            "prior over {} classes vs {} prediction columns",
            r.len(),
            f.n_classes()
        )));
    }
    Ok(())
}

/// `r_j^-M`, rescaled so the largest factor is 1. A per-class constant
/// cancels in the row normalization.
fn prior_factors(r: &ClassPrior, m: f64) -> Vec<f64> {
    let r_min = r.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    r.as_slice().iter().map(|&rj| (r_min / rj).powf(m)).collect()
}

#[inline]
fn pow_lambda(x: f64, lambda: f64, int_lambda: Option<i32>) -> f64 {
    match int_lambda {
        Some(k) => x.powi(k),
        None => x.powf(lambda),
    }
}

fn integral_exponent(lambda: f64) -> Option<i32> {
    (lambda.fract() == 0.0 && lambda <= 64.0).then_some(lambda as i32)
}

/// Row sums below this fall back to the log-space route.
const DIRECT_SUM_FLOOR: f64 = 1e-250;

#[allow(clippy::too_many_arguments)]
fn plr_row(
    f: ArrayView1<'_, f64>,
    s: ArrayView1<'_, bool>,
    factors: &[f64],
    ln_r: &[f64],
    h: PlrHyperparams,
    int_lambda: Option<i32>,
    mut out: ArrayViewMut1<'_, f64>,
) {
    // Scale by the largest candidate prediction so the leading term is 1.
    let mut f_max = 0.0f64;
    for (&fj, &sj) in f.iter().zip(s.iter()) {
        if sj {
            f_max = f_max.max(fj.max(PROB_EPS));
        }
    }
    let mut sum = 0.0;
    for (j, (&fj, &sj)) in f.iter().zip(s.iter()).enumerate() {
        let v = if sj {
            pow_lambda(fj.max(PROB_EPS) / f_max, h.lambda, int_lambda) * factors[j]
        } else {
            0.0
        };
        out[j] = v;
        sum += v;
    }
    if sum.is_finite() && sum > DIRECT_SUM_FLOOR {
        out.mapv_inplace(|v| v / sum);
    } else {
        plr_row_log_space(f, s, ln_r, h, out);
    }
}

fn plr_row_log_space(
    f: ArrayView1<'_, f64>,
    s: ArrayView1<'_, bool>,
    ln_r: &[f64],
    h: PlrHyperparams,
    mut out: ArrayViewMut1<'_, f64>,
) {
    let mut max_score = f64::NEG_INFINITY;
    for (j, (&fj, &sj)) in f.iter().zip(s.iter()).enumerate() {
        if sj {
            let score = h.lambda * fj.max(PROB_EPS).ln() - h.m * ln_r[j];
            out[j] = score;
            max_score = max_score.max(score);
        }
    }
    let mut sum = 0.0;
    for (j, &sj) in s.iter().enumerate() {
        let v = if sj { (out[j] - max_score).exp() } else { 0.0 };
        out[j] = v;
        sum += v;
    }
    out.mapv_inplace(|v| v / sum);
}

/// Closed-form minimizer of the regularized objective:
/// `w_ij = S_ij f_ij^lambda r_j^-M / sum_k S_ik f_ik^lambda r_k^-M`.
pub fn plr_update(
    f: &PredictionMatrix,
    s: &CandidateMatrix,
    r: &ClassPrior,
    h: PlrHyperparams,
) -> Result<PseudoLabelMatrix> {
    check_shapes(f, s, r)?;
    let factors = prior_factors(r, h.m);
    let ln_r = r.ln().to_vec();
    let int_lambda = integral_exponent(h.lambda);
    let mut out = Array2::zeros((f.n_samples(), f.n_classes()));
    for (i, row) in out.outer_iter_mut().enumerate() {
        plr_row(f.row(i), s.row(i), &factors, &ln_r, h, int_lambda, row);
    }
    Ok(PseudoLabelMatrix::from_normalized(out))
}

/// Same minimizer evaluated entirely through logs and a row-max shift.
pub fn plr_update_log_space(
    f: &PredictionMatrix,
    s: &CandidateMatrix,
    r: &ClassPrior,
    h: PlrHyperparams,
) -> Result<PseudoLabelMatrix> {
    check_shapes(f, s, r)?;
    let ln_r = r.ln().to_vec();
    let mut out = Array2::zeros((f.n_samples(), f.n_classes()));
    for (i, row) in out.outer_iter_mut().enumerate() {
        plr_row_log_space(f.row(i), s.row(i), &ln_r, h, row);
    }
    Ok(PseudoLabelMatrix::from_normalized(out))
}

/// PRODEN: predictions masked by the candidate set and renormalized.
pub fn proden_update(f: &PredictionMatrix, s: &CandidateMatrix) -> Result<PseudoLabelMatrix> {
    if f.n_samples() != s.n_samples() || f.n_classes() != s.n_classes() {
        return Err(Error::shape(format!(
            "predictions {}x{} vs candidates {}x{}",
            f.n_samples(),
            f.n_classes(),
            s.n_samples(),
            s.n_classes()
        )));
    }
    let mut out = Array2::zeros((f.n_samples(), f.n_classes()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let mut sum = 0.0;
        for (j, (&fj, &sj)) in f.row(i).iter().zip(s.row(i).iter()).enumerate() {
            let v = if sj { fj.max(PROB_EPS) } else { 0.0 };
            row[j] = v;
            sum += v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(PseudoLabelMatrix::from_normalized(out))
}

/// Objective value of a single row. `w` may be any nonnegative vector; the
/// `0 ln 0 = 0` convention applies.
pub fn row_objective(
    w: ArrayView1<'_, f64>,
    f: ArrayView1<'_, f64>,
    ln_r: ArrayView1<'_, f64>,
    h: PlrHyperparams,
) -> PlrObjectiveBreakdown {
    let mut classification = 0.0;
    let mut entropy = 0.0;
    let mut prior = 0.0;
    for j in 0..w.len() {
        let wj = w[j];
        if wj > 0.0 {
            classification -= wj * f[j].max(PROB_EPS).ln();
            entropy += xlogx(wj);
            prior += wj * ln_r[j];
        }
    }
    let entropy = entropy / h.lambda;
    let prior_penalty = prior * h.m / h.lambda;
    PlrObjectiveBreakdown {
        classification,
        entropy,
        prior_penalty,
        total: classification + entropy + prior_penalty,
    }
}

/// Evaluates the regularized objective summed over all samples.
pub fn plr_objective(
    w: &PseudoLabelMatrix,
    f: &PredictionMatrix,
    r: &ClassPrior,
    h: PlrHyperparams,
) -> Result<PlrObjectiveBreakdown> {
    if w.values().dim() != f.values().dim() || r.len() != f.n_classes() {
        return Err(Error::shape(format!(
            "pseudo labels {:?}, predictions {:?}, prior {}",
            w.values().dim(),
            f.values().dim(),
            r.len()
        )));
    }
    let ln_r = r.ln();
    let mut acc = PlrObjectiveBreakdown {
        classification: 0.0,
        entropy: 0.0,
        prior_penalty: 0.0,
        total: 0.0,
    };
    for i in 0..w.n_samples() {
        let b = row_objective(w.row(i), f.row(i), ln_r.view(), h);
        acc.classification += b.classification;
        acc.entropy += b.entropy;
        acc.prior_penalty += b.prior_penalty;
    }
    acc.total = acc.classification + acc.entropy + acc.prior_penalty;
    Ok(acc)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Stationarity, feasibility and support diagnostics of `w`.
///
/// `w` is taken raw so infeasible matrices can be inspected. The multiplier
/// of row `i` is the one the closed form implies, `v_i = (1 - ln Z_i) / lambda`
/// with `Z_i = sum_j S_ij f_ij^lambda r_j^-M`, so a report on the closed-form
/// output has zero residual up to rounding.
pub fn kkt_residual(
    w: ArrayView2<'_, f64>,
    f: &PredictionMatrix,
    r: &ClassPrior,
    h: PlrHyperparams,
    s: &CandidateMatrix,
) -> Result<KktReport> {
    check_shapes(f, s, r)?;
    if w.dim() != f.values().dim() {
        return Err(Error::shape(format!(
            "pseudo labels {:?} vs predictions {:?}",
            w.dim(),
            f.values().dim()
        )));
    }
    let ln_r = r.ln();
    let mut multipliers = Array1::zeros(w.nrows());
    let mut max_res = 0.0f64;
    let mut max_row = 0.0f64;
    let mut max_support = 0.0f64;
    for i in 0..w.nrows() {
        let ln_f: Vec<f64> = f.row(i).iter().map(|v| v.max(PROB_EPS).ln()).collect();
        let cands = s.candidates(i);
        let ln_z = log_sum_exp(cands.iter().map(|&j| h.lambda * ln_f[j] - h.m * ln_r[j]));
        let v = (1.0 - ln_z) / h.lambda;
        multipliers[i] = v;
        for &j in &cands {
            let wij = w[[i, j]];
            if wij.is_nan() || wij <= 0.0 {
                return Err(Error::NonPositiveWeightOnSupport(i, j));
            }
            let res = -ln_f[j] + (wij.ln() + 1.0) / h.lambda + h.m / h.lambda * ln_r[j] - v;
            max_res = max_res.max(res.abs());
        }
        let row_sum: f64 = w.row(i).sum();
        max_row = max_row.max((row_sum - 1.0).abs());
        let outside: f64 = (0..w.ncols())
            .filter(|&j| !s.contains(i, j))
            .map(|j| w[[i, j]].abs())
            .sum();
        max_support = max_support.max(outside);
    }
    Ok(KktReport {
        max_stationarity_residual: max_res,
        max_row_sum_violation: max_row,
        max_support_violation: max_support,
        multipliers,
    })
}

/// Smallest eigenvalue of the objective's Hessian restricted to the
/// candidate support. The Hessian is `diag(1 / (lambda w_ij))`, so this is
/// `1 / (lambda max w_ij)`, strictly positive whenever `w > 0` on the support.
pub fn hessian_min_eigen_lower_bound(
    w: &PseudoLabelMatrix,
    s: &CandidateMatrix,
    h: PlrHyperparams,
) -> Result<f64> {
    if w.values().dim() != s.bits().dim() {
        return Err(Error::shape(format!(
            "pseudo labels {:?} vs candidates {:?}",
            w.values().dim(),
            s.bits().dim()
        )));
    }
    let mut w_max = 0.0f64;
    for ((i, j), &v) in w.values().indexed_iter() {
        if s.contains(i, j) {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::NonPositiveWeightOnSupport(i, j));
            }
            w_max = w_max.max(v);
        }
    }
    Ok(1.0 / (h.lambda * w_max))
}
