//! Moving-average estimation of the class prior.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::{clamp_prior, ClassPrior, PredictionMatrix, PseudoLabelMatrix};

/// Which training signal feeds the empirical class distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PriorRule {
    /// Histogram of prediction argmaxes.
    #[default]
    HardPred,
    /// Column means of the predictions.
    SoftPred,
    /// Histogram of pseudo-label argmaxes.
    HardPseudo,
}

impl PriorRule {
    pub fn name(self) -> &'static str {
        match self {
            PriorRule::HardPred => "hard-pred",
            PriorRule::SoftPred => "soft-pred",
            PriorRule::HardPseudo => "hard-pseudo",
        }
    }
}

impl fmt::Display for PriorRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard-pred" => Ok(PriorRule::HardPred),
            "soft-pred" => Ok(PriorRule::SoftPred),
            "hard-pseudo" => Ok(PriorRule::HardPseudo),
            other => Err(Error::invalid(format!(
                "unknown prior rule {other:?} (expected hard-pred, soft-pred or hard-pseudo)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorEstimator {
    r: ClassPrior,
    mu: f64,
    rule: PriorRule,
}

fn hard_histogram(argmaxes: &[usize], c: usize) -> Vec<f64> {
    let mut hist = vec![0.0; c];
    for &k in argmaxes {
        hist[k] += 1.0;
    }
    let n = argmaxes.len() as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    hist
}

impl PriorEstimator {
    /// Uniform prior over `c` classes.
    pub fn init_uniform(c: usize, mu: f64, rule: PriorRule) -> Result<Self> {
        Self::with_prior(ClassPrior::uniform(c)?, mu, rule)
    }

    pub fn with_prior(r: ClassPrior, mu: f64, rule: PriorRule) -> Result<Self> {
        check_mu(mu)?;
        Ok(Self { r, mu, rule })
    }

    pub fn prior(&self) -> &ClassPrior {
        &self.r
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn rule(&self) -> PriorRule {
        self.rule
    }

    /// Changes the moving-average coefficient, e.g. between training stages.
    pub fn set_mu(&mut self, mu: f64) -> Result<()> {
        check_mu(mu)?;
        self.mu = mu;
        Ok(())
    }

    fn ensure_rule(&self, rule: PriorRule) -> Result<()> {
        if self.rule != rule {
            return Err(Error::RuleMismatch {
                expected: self.rule.name(),
                got: rule.name(),
            });
        }
        Ok(())
    }

    /// `r <- mu r + (1 - mu) e`, clamped back onto the simplex.
    pub fn blend(&mut self, empirical: &[f64]) -> Result<()> {
        if empirical.len() != self.r.len() {
            return Err(Error::shape(format!(
                "empirical distribution over {} classes vs prior over {}",
                empirical.len(),
                self.r.len()
            )));
        }
        let mixed: Vec<f64> = self
            .r
            .as_slice()
            .iter()
            .zip(empirical)
            .map(|(r, e)| self.mu * r + (1.0 - self.mu) * e)
            .collect();
        self.r = clamp_prior(&mixed)?;
        Ok(())
    }

    fn check_width(&self, c: usize) -> Result<()> {
        if c != self.r.len() {
            return Err(Error::shape(format!(
                "{c} classes vs prior over {}",
                self.r.len()
            )));
        }
        Ok(())
    }

    pub fn update_hard_pred(&mut self, p: &PredictionMatrix) -> Result<()> {
        self.ensure_rule(PriorRule::HardPred)?;
        self.check_width(p.n_classes())?;
        let hist = hard_histogram(&p.argmax_rows(), p.n_classes());
        self.blend(&hist)
    }

    pub fn update_soft_pred(&mut self, p: &PredictionMatrix) -> Result<()> {
        self.ensure_rule(PriorRule::SoftPred)?;
        self.check_width(p.n_classes())?;
        let n = p.n_samples() as f64;
        let means: Vec<f64> = p
            .values()
            .columns()
            .into_iter()
            .map(|col| col.sum() / n)
            .collect();
        self.blend(&means)
    }

    pub fn update_hard_pseudo(&mut self, w: &PseudoLabelMatrix) -> Result<()> {
        self.ensure_rule(PriorRule::HardPseudo)?;
        self.check_width(w.n_classes())?;
        let hist = hard_histogram(&w.argmax_rows(), w.n_classes());
        self.blend(&hist)
    }

    /// Dispatches on the configured rule. Prediction-based rules read `p`,
    /// the pseudo-label rule reads `w`.
    pub fn update(&mut self, p: &PredictionMatrix, w: &PseudoLabelMatrix) -> Result<()> {
        match self.rule {
            PriorRule::HardPred => self.update_hard_pred(p),
            PriorRule::SoftPred => self.update_soft_pred(p),
            PriorRule::HardPseudo => self.update_hard_pseudo(w),
        }
    }

    /// `max_j |r_j - truth_j|`.
    pub fn prior_error(&self, truth: &ClassPrior) -> Result<f64> {
        self.r.max_abs_diff(truth)
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("moving-average coefficient {mu} outside [0, 1]")));
    }
    Ok(())
}
