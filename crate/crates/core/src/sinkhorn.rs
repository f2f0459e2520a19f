//! Sinkhorn-Knopp scaling for prior-matched pseudo labels (the Solar
//! baseline).
//!
//! The kernel `K_ij = S_ij f_ij^lambda` is scaled by row factors (each row
//! carries mass 1) and column factors (column `j` carries mass `N r_j`). The
//! iteration always ends on a row step, so the returned matrix is exactly
//! row-stochastic; when the column targets are not met within the iteration
//! budget the result is flagged `relaxed`.
//!
//! Scalings live in log space. Non-candidate entries are skipped, never
//! stored as `-inf`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{CandidateMatrix, ClassPrior, PredictionMatrix, PseudoLabelMatrix, PROB_EPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub max_iters: usize,
    /// Tolerance on the column-marginal error, see [`SinkhornResult`].
    pub tol: f64,
    pub lambda: f64,
}

impl SinkhornConfig {
    pub fn new(max_iters: usize, tol: f64, lambda: f64) -> Result<Self> {
        if max_iters == 0 {
            return Err(Error::invalid("sinkhorn needs at least one iteration"));
        }
        if tol.is_nan() || tol <= 0.0 {
            return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            max_iters,
            tol,
            lambda,
        })
    }
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-3,
            lambda: 3.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub w: PseudoLabelMatrix,
    pub iterations_used: usize,
    /// `max_i |sum_j w_ij - 1|`.
    pub row_marginal_err: f64,
    /// `sum_j |sum_i w_ij - N r_j| / N`, the L1 column error per sample.
    pub col_marginal_err: f64,
    pub relaxed: bool,
    /// Classes with prior mass but no candidate sample; their targets are
    /// dropped.
    pub infeasible_columns: Vec<usize>,
    /// Column error after the initial row normalization and after every
    /// iteration.
    pub col_err_history: Vec<f64>,
}

/// Row and column marginal errors of `w` against the targets `1` and `N r_j`:
/// `(max_i |sum_j w_ij - 1|, max_j |sum_i w_ij - N r_j| / N)`.
pub fn marginal_errors(w: &PseudoLabelMatrix, r: &ClassPrior) -> Result<(f64, f64)> {
    if w.n_classes() != r.len() {
        return Err(Error::shape(format!(
            "pseudo labels over {} classes vs prior over {}",
            w.n_classes(),
            r.len()
        )));
    }
    let n = w.n_samples() as f64;
    let row_err = w
        .values()
        .outer_iter()
        .map(|row| (row.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let col_err = w
        .values()
        .columns()
        .into_iter()
        .zip(r.as_slice())
        .map(|(col, &rj)| (col.sum() - n * rj).abs() / n)
        .fold(0.0, f64::max);
    Ok((row_err, col_err))
}

struct Scaling<'a> {
    log_k: Array2<f64>,
    s: &'a CandidateMatrix,
    row_log: Vec<f64>,
    col_log: Vec<f64>,
    w: Array2<f64>,
    col_sums: Vec<f64>,
}

impl Scaling<'_> {
    /// Row step: fixes every row mass to 1 under the current column factors,
    /// materializing `w` and its column sums along the way.
    fn row_step(&mut self) {
        self.col_sums.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.log_k.nrows() {
            let mut max = f64::NEG_INFINITY;
            for j in 0..self.log_k.ncols() {
                if self.s.contains(i, j) {
                    max = max.max(self.log_k[[i, j]] + self.col_log[j]);
                }
            }
            let mut sum = 0.0;
            for j in 0..self.log_k.ncols() {
                let v = if self.s.contains(i, j) {
                    (self.log_k[[i, j]] + self.col_log[j] - max).exp()
                } else {
                    0.0
                };
                self.w[[i, j]] = v;
                sum += v;
            }
            self.row_log[i] = -(max + sum.ln());
            for j in 0..self.log_k.ncols() {
                let v = self.w[[i, j]] / sum;
                self.w[[i, j]] = v;
                self.col_sums[j] += v;
            }
        }
    }

    /// Column step: rescales each feasible column to its target. Uses the
    /// column sums of the current `w`, which equal the kernel sums under the
    /// present factors.
    fn col_step(&mut self, targets: &[f64], feasible: &[bool]) {
        for j in 0..self.col_log.len() {
            if feasible[j] {
                self.col_log[j] += targets[j].ln() - self.col_sums[j].ln();
            }
        }
    }

    fn col_error(&self, targets: &[f64], n: f64) -> f64 {
        self.col_sums
            .iter()
            .zip(targets)
            .map(|(c, t)| (c - t).abs())
            .sum::<f64>()
            / n
    }
}

/// Prior-matched pseudo labels by alternating row and column scaling.
pub fn solar_update(
    f: &PredictionMatrix,
    s: &CandidateMatrix,
    r: &ClassPrior,
    cfg: SinkhornConfig,
) -> Result<SinkhornResult> {
    if f.n_samples() != s.n_samples() || f.n_classes() != s.n_classes() || r.len() != f.n_classes()
    {
        return Err(Error::shape(format!(
            "predictions {}x{}, candidates {}x{}, prior {}",
            f.n_samples(),
            f.n_classes(),
            s.n_samples(),
            s.n_classes(),
            r.len()
        )));
    }
    let (n_rows, n_cols) = (f.n_samples(), f.n_classes());
    let n = n_rows as f64;
    let targets: Vec<f64> = r.as_slice().iter().map(|rj| n * rj).collect();
    let feasible: Vec<bool> = (0..n_cols)
        .map(|j| (0..n_rows).any(|i| s.contains(i, j)))
        .collect();
    let infeasible_columns: Vec<usize> = (0..n_cols).filter(|&j| !feasible[j]).collect();

    let log_k = f.values().mapv(|v| cfg.lambda * v.max(PROB_EPS).ln());
    let mut sc = Scaling {
        log_k,
        s,
        row_log: vec![0.0; n_rows],
        col_log: vec![0.0; n_cols],
        w: Array2::zeros((n_rows, n_cols)),
        col_sums: vec![0.0; n_cols],
    };
    sc.row_step();
    let mut err = sc.col_error(&targets, n);
    let mut history = vec![err];
    let mut iterations_used = 0;
    for t in 1..=cfg.max_iters {
        sc.col_step(&targets, &feasible);
        sc.row_step();
        err = sc.col_error(&targets, n);
        history.push(err);
        iterations_used = t;
        if err <= cfg.tol {
            break;
        }
    }
    let w = PseudoLabelMatrix::from_normalized(sc.w);
    let row_marginal_err = w
        .values()
        .outer_iter()
        .map(|row| (row.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(SinkhornResult {
        w,
        iterations_used,
        row_marginal_err,
        col_marginal_err: err,
        relaxed: err > cfg.tol || !infeasible_columns.is_empty(),
        infeasible_columns,
        col_err_history: history,
    })
}
