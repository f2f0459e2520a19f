//! Class-wise small-loss selection of reliable samples.

use crate::error::{Error, Result};
use crate::types::{ClassPrior, PseudoLabelMatrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionConfig {
    pub rho_start: f64,
    pub rho_end: f64,
    pub ramp_epochs: usize,
}

impl SelectionConfig {
    pub fn new(rho_start: f64, rho_end: f64, ramp_epochs: usize) -> Result<Self> {
        if !(0.0 <= rho_start && rho_start <= rho_end && rho_end <= 1.0) {
            return Err(Error::invalid(format!(
                "need 0 <= rho_start <= rho_end <= 1, got {rho_start}, {rho_end}"
            )));
        }
        if ramp_epochs == 0 {
            return Err(Error::invalid("ramp_epochs must be at least 1"));
        }
        Ok(Self {
            rho_start,
            rho_end,
            ramp_epochs,
        })
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            rho_start: 0.2,
            rho_end: 0.5,
            ramp_epochs: 50,
        }
    }
}

/// Linear ramp from `rho_start` at epoch 0 to `rho_end` at `ramp_epochs`,
/// flat afterwards.
pub fn rho_at(cfg: &SelectionConfig, epoch: usize) -> f64 {
    if epoch >= cfg.ramp_epochs {
        return cfg.rho_end;
    }
    let t = epoch as f64 / cfg.ramp_epochs as f64;
    cfg.rho_start + (cfg.rho_end - cfg.rho_start) * t
}

/// Per-class budget `ceil(rho r_k |B|)`. The small slack keeps products that
/// are integers in exact arithmetic from rounding up an extra slot.
pub fn class_budget(rho: f64, r_k: f64, batch: usize) -> usize {
    let x = rho * r_k * batch as f64;
    if x <= 0.0 {
        0
    } else {
        (x - 1e-9).ceil().max(0.0) as usize
    }
}

/// Buckets the batch by pseudo-label argmax and keeps, inside each bucket,
/// the `min(|B_k|, ceil(rho r_k |B|))` smallest-loss samples. Equal losses
/// go to the smaller index. Returned indices are ascending.
pub fn select_reliable(
    w: &PseudoLabelMatrix,
    losses: &[f64],
    r: &ClassPrior,
    rho: f64,
) -> Result<Vec<usize>> {
    let b = w.n_samples();
    if losses.len() != b {
        return Err(Error::shape(format!("{} losses for {b} samples", losses.len())));
    }
    if r.len() != w.n_classes() {
        return Err(Error::shape(format!(
            "prior over {} classes vs {} pseudo-label columns",
            r.len(),
            w.n_classes()
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho {rho} outside [0, 1]")));
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); w.n_classes()];
    for (i, k) in w.argmax_rows().into_iter().enumerate() {
        buckets[k].push(i);
    }
    let mut selected = Vec::new();
    for (k, mut bucket) in buckets.into_iter().enumerate() {
        let budget = class_budget(rho, r.as_slice()[k], b).min(bucket.len());
        bucket.sort_by(|&a, &c| losses[a].total_cmp(&losses[c]).then(a.cmp(&c)));
        selected.extend_from_slice(&bucket[..budget]);
    }
    selected.sort_unstable();
    Ok(selected)
}
