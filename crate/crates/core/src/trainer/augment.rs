//! Weak/strong feature perturbations and mixup for vector inputs.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::PseudoLabelMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_dropout_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise_sigma: 0.05,
            strong_noise_sigma: 0.2,
            strong_dropout_p: 0.2,
        }
    }
}

/// Weak view: additive Gaussian noise. Strong view: larger noise, then each
/// coordinate zeroed independently with probability `strong_dropout_p`.
pub fn augment(x: ArrayView2<'_, f64>, rng: &mut Rng, kind: AugmentKind, cfg: &AugmentConfig) -> Array2<f64> {
    let (sigma, drop) = match kind {
        AugmentKind::Weak => (cfg.weak_noise_sigma, 0.0),
        AugmentKind::Strong => (cfg.strong_noise_sigma, cfg.strong_dropout_p),
    };
    let mut out = x.to_owned();
    out.mapv_inplace(|v| {
        let noisy = if sigma > 0.0 { v + sigma * rng.normal() } else { v };
        if drop > 0.0 && rng.bernoulli(drop) {
            0.0
        } else {
            noisy
        }
    });
    out
}

/// A mixed batch and how it was formed.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub x: Array2<f64>,
    pub w: PseudoLabelMatrix,
    pub coeff: f64,
    pub perm: Vec<usize>,
}

/// `coeff * (x, w) + (1 - coeff) * (x, w)[perm]`.
pub fn mixup_with(x: ArrayView2<'_, f64>, w: &PseudoLabelMatrix, coeff: f64, perm: Vec<usize>) -> Result<Mixed> {
    let n = x.nrows();
    if w.n_samples() != n || perm.len() != n {
        return Err(Error::shape(format!(
            "{n} inputs, {} pseudo labels, permutation of {}",
            w.n_samples(),
            perm.len()
        )));
    }
    if !(0.0..=1.0).contains(&coeff) {
        return Err(Error::invalid(format!("mixup coefficient {coeff} outside [0, 1]")));
    }
    let xp = x.select(Axis(0), &perm);
    let wp = w.values().select(Axis(0), &perm);
    let x_mix = &x * coeff + &xp * (1.0 - coeff);
    let mut w_mix = &w.values() * coeff + &wp * (1.0 - coeff);
    // Renormalize away rounding so the rows stay exactly stochastic.
    for mut row in w_mix.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(Mixed {
        x: x_mix,
        w: PseudoLabelMatrix::new(w_mix)?,
        coeff,
        perm,
    })
}

/// Mixup with `coeff ~ Beta(alpha, alpha)` and a uniform random partner.
pub fn mixup_batch(x: ArrayView2<'_, f64>, w: &PseudoLabelMatrix, alpha: f64, rng: &mut Rng) -> Result<Mixed> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let coeff = rng.beta(alpha, alpha);
    let perm = rng.permutation(x.nrows());
    mixup_with(x, w, coeff, perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_noise_is_identity() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let cfg = AugmentConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_dropout_p: 0.0,
        };
        let mut rng = Rng::new(1);
        assert_eq!(augment(x.view(), &mut rng, AugmentKind::Weak, &cfg), x);
        assert_eq!(augment(x.view(), &mut rng, AugmentKind::Strong, &cfg), x);
    }

    #[test]
    fn seeded_views_repeat() {
        let x = Array2::from_elem((4, 3), 1.0);
        let cfg = AugmentConfig::default();
        let a = augment(x.view(), &mut Rng::new(9), AugmentKind::Strong, &cfg);
        let b = augment(x.view(), &mut Rng::new(9), AugmentKind::Strong, &cfg);
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn full_dropout_zeroes_everything() {
        let x = Array2::from_elem((3, 5), 2.0);
        let cfg = AugmentConfig {
            strong_dropout_p: 1.0,
            ..AugmentConfig::default()
        };
        let out = augment(x.view(), &mut Rng::new(2), AugmentKind::Strong, &cfg);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_coefficient_is_identity() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let w = PseudoLabelMatrix::new(array![[1.0, 0.0], [0.25, 0.75]]).unwrap();
        let m = mixup_with(x.view(), &w, 1.0, vec![1, 0]).unwrap();
        assert_eq!(m.x, x);
        assert_eq!(m.w, w);
    }

    #[test]
    fn half_coefficient_gives_pair_means() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let w = PseudoLabelMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = mixup_with(x.view(), &w, 0.5, vec![1, 0]).unwrap();
        assert_eq!(m.x, array![[2.0, 3.0], [2.0, 3.0]]);
        assert_eq!(m.w.values(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn mixed_rows_stay_stochastic() {
        let mut rng = Rng::new(3);
        let x = Array2::from_shape_fn((16, 4), |(i, j)| (i * 4 + j) as f64);
        let w = PseudoLabelMatrix::new(Array2::from_shape_fn((16, 3), |(i, j)| {
            [[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]][i % 2][j]
        }))
        .unwrap();
        for _ in 0..20 {
            let m = mixup_batch(x.view(), &w, 4.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&m.coeff));
            for row in m.w.values().outer_iter() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
        assert!(mixup_batch(x.view(), &w, 0.0, &mut rng).is_err());
    }
}
