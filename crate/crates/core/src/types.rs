//! Validated matrices and vectors shared by the solvers, the trainer and the
//! dataset tooling.
//!
//! Every type here establishes its invariants at construction and is
//! immutable afterwards, so a value that exists is a valid value.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Floor applied to predicted probabilities before any log or power.
pub const PROB_EPS: f64 = 1e-12;
/// Floor applied to class-prior entries.
pub const PRIOR_EPS: f64 = 1e-8;
/// Tolerance on row sums of stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// `x ln x` with the limit convention `0 ln 0 = 0`.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Index of the largest entry, ties resolved toward the smallest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_val {
            best = j;
            best_val = v;
        }
    }
    best
}

/// Row-wise [`argmax`].
pub fn argmax_rows(m: ArrayView2<'_, f64>) -> Vec<usize> {
    m.outer_iter().map(argmax).collect()
}

/// Binary candidate-set indicator, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMatrix {
    bits: Array2<bool>,
}

/// Checks that every sample has at least one candidate label.
pub fn validate_candidates(bits: ArrayView2<'_, bool>) -> Result<()> {
    if bits.nrows() == 0 || bits.ncols() == 0 {
        return Err(Error::shape(format!(
            "candidate matrix must be non-empty, got {}x{}",
            bits.nrows(),
            bits.ncols()
        )));
    }
    for (i, row) in bits.outer_iter().enumerate() {
        if !row.iter().any(|&b| b) {
            return Err(Error::EmptyCandidateRow(i));
        }
    }
    Ok(())
}

impl CandidateMatrix {
    pub fn new(bits: Array2<bool>) -> Result<Self> {
        validate_candidates(bits.view())?;
        Ok(Self { bits })
    }

    /// Builds from 0/1 rows, convenient for literals.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let c = rows.first().map_or(0, |r| r.len());
        let mut bits = Array2::from_elem((rows.len(), c), false);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != c {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {c}",
                    r.len()
                )));
            }
            for (j, &b) in r.iter().enumerate() {
                bits[[i, j]] = b != 0;
            }
        }
        Self::new(bits)
    }

    /// Builds from per-sample lists of candidate class ids.
    pub fn from_sets(sets: &[Vec<usize>], n_classes: usize) -> Result<Self> {
        let mut bits = Array2::from_elem((sets.len(), n_classes), false);
        for (i, set) in sets.iter().enumerate() {
            for &j in set {
                if j >= n_classes {
                    return Err(Error::invalid(format!(
                        "sample {i}: class {j} out of range for {n_classes} classes"
                    )));
                }
                bits[[i, j]] = true;
            }
        }
        Self::new(bits)
    }

    /// Every class is a candidate for every sample.
    pub fn full(n_samples: usize, n_classes: usize) -> Result<Self> {
        Self::new(Array2::from_elem((n_samples, n_classes), true))
    }

    pub fn n_samples(&self) -> usize {
        self.bits.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.bits.ncols()
    }

    pub fn bits(&self) -> ArrayView2<'_, bool> {
        self.bits.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, bool> {
        self.bits.row(i)
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.bits[[i, j]]
    }

    /// Ascending candidate class ids of sample `i`.
    pub fn candidates(&self, i: usize) -> Vec<usize> {
        self.bits
            .row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
            .collect()
    }

    pub fn set_size(&self, i: usize) -> usize {
        self.bits.row(i).iter().filter(|&&b| b).count()
    }

    pub fn mean_set_size(&self) -> f64 {
        let total: usize = (0..self.n_samples()).map(|i| self.set_size(i)).sum();
        total as f64 / self.n_samples() as f64
    }

    /// Sub-matrix of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            bits: self.bits.select(Axis(0), idx),
        }
    }
}

fn check_row_stochastic(values: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    for (i, row) in values.outer_iter().enumerate() {
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{what} ({i}, {j}) = {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!("{what} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Row-stochastic classifier outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    values: Array2<f64>,
}

impl PredictionMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("prediction matrix must be non-empty"));
        }
        check_row_stochastic(values.view(), "prediction")?;
        Ok(Self { values })
    }

    /// Row-softmax of raw scores, stabilized by row-max subtraction.
    pub fn from_logits(logits: ArrayView2<'_, f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::shape("logit matrix must be non-empty"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logit"));
        }
        let mut values = logits.to_owned();
        for mut row in values.outer_iter_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Ok(Self { values })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), idx),
        }
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        argmax_rows(self.values.view())
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Row-stochastic disambiguation weights.
///
/// Support containment against a candidate matrix is checked separately with
/// [`PseudoLabelMatrix::validate_support`], since mixed-up targets legitimately
/// spread over the union of two candidate sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMatrix {
    values: Array2<f64>,
}

impl PseudoLabelMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("pseudo-label matrix must be non-empty"));
        }
        check_row_stochastic(values.view(), "pseudo label")?;
        Ok(Self { values })
    }

    /// Validates against a candidate matrix as well.
    pub fn with_support(values: Array2<f64>, s: &CandidateMatrix) -> Result<Self> {
        let w = Self::new(values)?;
        w.validate_support(s)?;
        Ok(w)
    }

    /// One-hot rows at the given classes.
    pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut values = Array2::zeros((labels.len(), n_classes));
        for (i, &y) in labels.iter().enumerate() {
            if y >= n_classes {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            values[[i, y]] = 1.0;
        }
        Self::new(values)
    }

    /// Uniform weight over each sample's candidates.
    pub fn uniform_over(s: &CandidateMatrix) -> Self {
        let mut values = Array2::zeros((s.n_samples(), s.n_classes()));
        for i in 0..s.n_samples() {
            let k = s.set_size(i) as f64;
            for j in s.candidates(i) {
                values[[i, j]] = 1.0 / k;
            }
        }
        Self { values }
    }

    pub(crate) fn from_normalized(values: Array2<f64>) -> Self {
        debug_assert!(check_row_stochastic(values.view(), "pseudo label").is_ok());
        Self { values }
    }

    pub fn validate_support(&self, s: &CandidateMatrix) -> Result<()> {
        if self.values.dim() != s.bits().dim() {
            return Err(Error::shape(format!(
                "pseudo labels {:?} vs candidates {:?}",
                self.values.dim(),
                s.bits().dim()
            )));
        }
        for ((i, j), &v) in self.values.indexed_iter() {
            if v != 0.0 && !s.contains(i, j) {
                return Err(Error::invalid(format!(
                    "pseudo label ({i}, {j}) = {v} outside the candidate set"
                )));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), idx),
        }
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        argmax_rows(self.values.view())
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Strictly positive class-probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    values: Array1<f64>,
}

/// Clamps every entry to at least [`PRIOR_EPS`] and renormalizes so the
/// result sums to one with the floor still honored.
pub fn clamp_prior(raw: &[f64]) -> Result<ClassPrior> {
    if raw.is_empty() {
        return Err(Error::shape("prior must have at least one class"));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::invalid(format!("prior entry {v} is not a nonnegative number")));
    }
    let c = raw.len();
    if c as f64 * PRIOR_EPS > 1.0 {
        return Err(Error::invalid(format!("{c} classes cannot all hold the prior floor")));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZeroPrior);
    }
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mut floored = vec![false; c];
    // Each pass floors at least one more entry, so this ends within c passes.
    loop {
        let n_floored = floored.iter().filter(|&&f| f).count();
        let free_mass = 1.0 - n_floored as f64 * PRIOR_EPS;
        let free_sum: f64 = p
            .iter()
            .zip(&floored)
            .filter(|(_, &f)| !f)
            .map(|(v, _)| v)
            .sum();
        let scale = if free_sum > 0.0 { free_mass / free_sum } else { 0.0 };
        let mut changed = false;
        for j in 0..c {
            if floored[j] {
                p[j] = PRIOR_EPS;
            } else {
                let v = p[j] * scale;
                if v < PRIOR_EPS {
                    floored[j] = true;
                    changed = true;
                }
                p[j] = v;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(ClassPrior {
        values: Array1::from(p),
    })
}

impl ClassPrior {
    /// Takes `values` as they are; they must already hold the floor and sum
    /// to one within [`ROW_SUM_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("prior must have at least one class"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= PRIOR_EPS * (1.0 - 1e-9))) {
            return Err(Error::invalid(format!("prior entry {v} is below the floor")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!("prior sums to {total}")));
        }
        Ok(Self {
            values: Array1::from(values),
        })
    }

    pub fn uniform(n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::shape("prior must have at least one class"));
        }
        Ok(Self {
            values: Array1::from_elem(n_classes, 1.0 / n_classes as f64),
        })
    }

    /// Empirical class frequencies of `labels`, clamped.
    pub fn from_labels(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut counts = vec![0.0; n_classes];
        for &y in labels {
            if y >= n_classes {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            counts[y] += 1.0;
        }
        clamp_prior(&counts)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("prior is contiguous")
    }

    pub fn ln(&self) -> Array1<f64> {
        self.values.mapv(f64::ln)
    }

    pub fn max_abs_diff(&self, other: &ClassPrior) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "priors over {} and {} classes",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Entropy temperature `lambda` and head-penalty exponent `m` of the
/// regularized pseudo-label objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlrHyperparams {
    pub lambda: f64,
    pub m: f64,
}

impl PlrHyperparams {
    pub fn new(lambda: f64, m: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        if !(m.is_finite() && m >= 0.0) {
            return Err(Error::invalid(format!("M must be nonnegative, got {m}")));
        }
        Ok(Self { lambda, m })
    }

    /// The PRODEN special case.
    pub fn proden() -> Self {
        Self { lambda: 1.0, m: 0.0 }
    }
}

impl Default for PlrHyperparams {
    fn default() -> Self {
        Self { lambda: 3.0, m: 2.0 }
    }
}

/// Divides every row by its sum.
pub fn row_normalize(v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = v.to_owned();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid(format!("row {i} has a negative or non-finite entry")));
        }
        let sum = row.sum();
        if sum <= 0.0 {
            return Err(Error::ZeroRowSum(i));
        }
        row.mapv_inplace(|x| x / sum);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn candidate_validation() {
        assert!(validate_candidates(array![[true, false], [false, true]].view()).is_ok());
        assert!(matches!(
            validate_candidates(array![[true, true], [false, false]].view()),
            Err(Error::EmptyCandidateRow(1))
        ));
        assert!(validate_candidates(array![[true, true, true]].view()).is_ok());
        assert!(matches!(
            CandidateMatrix::from_rows(&[&[1, 1], &[0, 0]]),
            Err(Error::EmptyCandidateRow(1))
        ));
    }

    #[test]
    fn clamp_prior_examples() {
        let p = clamp_prior(&[0.5, 0.5]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = clamp_prior(&[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 1.0 - 1e-8, epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[1], 1e-8, epsilon = 1e-20);
        assert!(p.as_slice()[1] >= PRIOR_EPS);

        assert!(matches!(clamp_prior(&[0.0, 0.0]), Err(Error::AllZeroPrior)));
        assert!(clamp_prior(&[]).is_err());
        assert!(clamp_prior(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn clamp_prior_cascade_keeps_floor() {
        // Scaling the free entries down may push another one under the floor.
        let p = clamp_prior(&[1.0, 0.0, 0.0, 1.5e-8]).unwrap();
        let sum: f64 = p.as_slice().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(p.as_slice().iter().all(|&v| v >= PRIOR_EPS));
    }

    #[test]
    fn row_normalize_examples() {
        assert_eq!(row_normalize(array![[2.0, 2.0]].view()).unwrap(), array![[0.5, 0.5]]);
        assert_eq!(row_normalize(array![[1.0, 3.0]].view()).unwrap(), array![[0.25, 0.75]]);
        assert!(matches!(
            row_normalize(array![[0.0, 0.0]].view()),
            Err(Error::ZeroRowSum(0))
        ));
    }

    #[test]
    fn stochastic_checks() {
        assert!(PredictionMatrix::new(array![[0.5, 0.6]]).is_err());
        assert!(PredictionMatrix::new(array![[1.1, -0.1]]).is_err());
        let w = PseudoLabelMatrix::new(array![[0.5, 0.5]]).unwrap();
        let s = CandidateMatrix::from_rows(&[&[1, 0]]).unwrap();
        assert!(w.validate_support(&s).is_err());
        let s = CandidateMatrix::from_rows(&[&[1, 1]]).unwrap();
        assert!(w.validate_support(&s).is_ok());
    }

    #[test]
    fn softmax_shift_invariant() {
        let p = PredictionMatrix::from_logits(array![[7.0, 7.0], [-1e3, -1e3]].view()).unwrap();
        assert_eq!(p.values(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![0.2, 0.4, 0.4].view()), 1);
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(PlrHyperparams::new(0.0, 1.0).is_err());
        assert!(PlrHyperparams::new(1.0, -0.5).is_err());
        assert!(PlrHyperparams::new(3.0, 0.0).is_ok());
        assert_eq!(PlrHyperparams::default(), PlrHyperparams { lambda: 3.0, m: 2.0 });
    }
}
