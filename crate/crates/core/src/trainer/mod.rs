//! Two-stage pseudo-label training of a small softmax classifier.
//!
//! Stage 1 trains from a uniform prior with the stage-1 moving-average rate to
//! get a coarse estimate of the class prior. The network is then
//! re-initialized and stage 2 trains from that estimate with the stage-2 rate.

pub mod augment;
pub mod mlp;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};

use crate::datagen::PartialDataset;
use crate::error::{Error, Result};
use crate::prior::{PriorEstimator, PriorRule};
use crate::report::{group_accuracy, GroupAccuracy};
use crate::rng::Rng;
use crate::selection::{rho_at, select_reliable, SelectionConfig};
use crate::sinkhorn::{solar_update, SinkhornConfig};
use crate::solver::{plr_update, proden_update};
use crate::types::{
    CandidateMatrix, ClassPrior, PlrHyperparams, PredictionMatrix, PseudoLabelMatrix, PROB_EPS,
};

pub use augment::{augment, mixup_batch, mixup_with, AugmentConfig, AugmentKind, Mixed};
pub use mlp::{
    accumulate, backward, forward, forward_cached, read_model, sgd_momentum_step, write_model, zero_grads, Dense,
    ForwardCache, ModelParams,
};

fn check_pair(probs: &PredictionMatrix, w: &PseudoLabelMatrix) -> Result<()> {
    if probs.n_samples() != w.n_samples() || probs.n_classes() != w.n_classes() {
        return Err(Error::shape(format!(
            "predictions {}x{} vs pseudo labels {}x{}",
            probs.n_samples(),
            probs.n_classes(),
            w.n_samples(),
            w.n_classes()
        )));
    }
    Ok(())
}

/// Per-sample `sum_j -w_ij log p_ij`, with probabilities clamped away from 0.
pub fn soft_ce(probs: &PredictionMatrix, w: &PseudoLabelMatrix) -> Result<Vec<f64>> {
    check_pair(probs, w)?;
    Ok(probs
        .values()
        .outer_iter()
        .zip(w.values().outer_iter())
        .map(|(p, wr)| {
            p.iter()
                .zip(wr.iter())
                .filter(|(_, &wj)| wj > 0.0)
                .map(|(&pj, &wj)| -wj * pj.max(PROB_EPS).ln())
                .sum()
        })
        .collect())
}

/// Gradient of the batch-mean soft cross-entropy with respect to the logits.
pub fn grad_logits_soft_ce(probs: &PredictionMatrix, w: &PseudoLabelMatrix) -> Result<Array2<f64>> {
    check_pair(probs, w)?;
    let b = probs.n_samples();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((&probs.values() - &w.values()) / b as f64)
}

/// Mean soft cross-entropy of the network on `x` against `w`, and its
/// parameter gradients.
pub fn loss_and_grads(params: &ModelParams, x: ArrayView2<'_, f64>, w: &PseudoLabelMatrix) -> Result<(f64, Vec<Dense>)> {
    let cache = forward_cached(params, x)?;
    let losses = soft_ce(&cache.probs, w)?;
    let g = grad_logits_soft_ce(&cache.probs, w)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((mean, backward(params, &cache, g.view())))
}

/// `lr0 (1 + cos(pi epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Which pseudo-label step the trainer runs each batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PseudoLabelMethod {
    #[default]
    Plr,
    Proden,
    Sinkhorn,
}

impl PseudoLabelMethod {
    pub fn name(self) -> &'static str {
        match self {
            PseudoLabelMethod::Plr => "plr",
            PseudoLabelMethod::Proden => "proden",
            PseudoLabelMethod::Sinkhorn => "sinkhorn",
        }
    }
}

impl fmt::Display for PseudoLabelMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PseudoLabelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plr" => Ok(PseudoLabelMethod::Plr),
            "proden" => Ok(PseudoLabelMethod::Proden),
            "sinkhorn" => Ok(PseudoLabelMethod::Sinkhorn),
            _ => Err(Error::invalid(format!(
                "unknown pseudo-label method {s:?} (expected plr, proden or sinkhorn)"
            ))),
        }
    }
}

/// Runs the configured pseudo-label step on one batch.
pub fn pseudo_labels(
    method: PseudoLabelMethod,
    f: &PredictionMatrix,
    s: &CandidateMatrix,
    r: &ClassPrior,
    plr: PlrHyperparams,
    sinkhorn: SinkhornConfig,
) -> Result<PseudoLabelMatrix> {
    match method {
        PseudoLabelMethod::Plr => plr_update(f, s, r, plr),
        PseudoLabelMethod::Proden => proden_update(f, s),
        PseudoLabelMethod::Sinkhorn => Ok(solar_update(f, s, r, sinkhorn)?.w),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub method: PseudoLabelMethod,
    pub plr: PlrHyperparams,
    pub sinkhorn: SinkhornConfig,
    pub selection: SelectionConfig,
    pub prior_rule: PriorRule,
    /// Moving-average rate in stage 1 and stage 2.
    pub mu_schedule: (f64, f64),
    pub pre_epochs: usize,
    pub augment: AugmentConfig,
    pub mixup_alpha: f64,
    /// Weights of the classification, consistency and mixup terms.
    pub loss_weights: (f64, f64, f64),
    /// Keep the prior uniform; with `m = 0` this is a plain PRODEN-style run.
    pub freeze_prior: bool,
    /// Apply the classification loss to the selected samples only.
    pub restrict_all_to_selected: bool,
    /// Record wall-clock time of the pseudo-label step. Off by default so
    /// that metrics are reproducible byte for byte.
    pub time_pseudo: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr0: 0.01,
            momentum: 0.9,
            hidden: vec![64, 64],
            method: PseudoLabelMethod::Plr,
            plr: PlrHyperparams::default(),
            sinkhorn: SinkhornConfig::default(),
            selection: SelectionConfig::default(),
            prior_rule: PriorRule::HardPred,
            mu_schedule: (0.1, 0.01),
            pre_epochs: 100,
            augment: AugmentConfig::default(),
            mixup_alpha: 4.0,
            loss_weights: (1.0, 1.0, 1.0),
            freeze_prior: false,
            restrict_all_to_selected: false,
            time_pseudo: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        positive("lr0", self.lr0)?;
        positive("mixup alpha", self.mixup_alpha)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        for (name, mu) in [("stage-1 mu", self.mu_schedule.0), ("stage-2 mu", self.mu_schedule.1)] {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::invalid(format!("{name} {mu} outside [0, 1]")));
            }
        }
        let (a, b, c) = self.loss_weights;
        if [a, b, c].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer sizes must be positive"));
        }
        let s = self.augment;
        if [s.weak_noise_sigma, s.strong_noise_sigma].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::invalid("noise scales must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&s.strong_dropout_p) {
            return Err(Error::invalid("dropout probability outside [0, 1]"));
        }
        PlrHyperparams::new(self.plr.lambda, self.plr.m)?;
        SelectionConfig::new(self.selection.rho_start, self.selection.rho_end, self.selection.ramp_epochs)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1 for pre-estimation, 2 for the main run.
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_cons: f64,
    pub loss_mix: f64,
    pub acc: GroupAccuracy,
    /// `max_j |r_j - true prior_j|`.
    pub prior_err: f64,
    pub pseudo_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub prior: ClassPrior,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutput {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }
}

/// Clean-input predictions of the model.
pub fn predict(params: &ModelParams, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<usize>)> {
    let (logits, probs) = forward(params, x)?;
    Ok((logits, probs.argmax_rows()))
}

struct Trainer<'a> {
    train: &'a PartialDataset,
    test: Option<&'a PartialDataset>,
    cfg: &'a TrainConfig,
    rng: Rng,
    truth: ClassPrior,
}

struct EpochLosses {
    cls: f64,
    cons: f64,
    mix: f64,
    pseudo_ms: f64,
}

impl Trainer<'_> {
    fn pseudo(&self, f: &PredictionMatrix, s: &CandidateMatrix, r: &ClassPrior) -> Result<PseudoLabelMatrix> {
        pseudo_labels(self.cfg.method, f, s, r, self.cfg.plr, self.cfg.sinkhorn)
    }

    fn stage(&self, stage: usize, epochs: usize, mu: f64, estimator: &mut PriorEstimator, out: &mut Vec<EpochMetrics>) -> Result<ModelParams> {
        let cfg = self.cfg;
        let stage_rng = self.rng.derive(stage as u64);
        let mut params = ModelParams::init(
            self.train.feature_dim(),
            &cfg.hidden,
            self.train.n_classes(),
            &mut stage_rng.derive(0),
        )?;
        estimator.set_mu(mu)?;
        for epoch in 0..epochs {
            let lr = cosine_lr(epoch, epochs, cfg.lr0);
            let epoch_rng = stage_rng.derive_path(&[1, epoch as u64]);
            let losses = self.epoch(stage, epoch, lr, &mut params, estimator.prior(), &epoch_rng)?;
            if !cfg.freeze_prior {
                self.update_prior(&params, estimator, &epoch_rng)?;
            }
            let acc = self.evaluate(&params)?;
            out.push(EpochMetrics {
                stage,
                epoch,
                lr,
                loss_cls: losses.cls,
                loss_cons: losses.cons,
                loss_mix: losses.mix,
                acc,
                prior_err: estimator.prior_error(&self.truth)?,
                pseudo_ms: losses.pseudo_ms,
            });
        }
        Ok(params)
    }

    fn epoch(&self, stage: usize, epoch: usize, lr: f64, params: &mut ModelParams, r: &ClassPrior, epoch_rng: &Rng) -> Result<EpochLosses> {
        let cfg = self.cfg;
        let n = self.train.n_samples();
        let order = epoch_rng.derive(0).permutation(n);
        let rho = rho_at(&cfg.selection, epoch);
        let (wc, wcons, wmix) = cfg.loss_weights;
        let mut sums = EpochLosses {
            cls: 0.0,
            cons: 0.0,
            mix: 0.0,
            pseudo_ms: 0.0,
        };
        let mut n_batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch_rng = epoch_rng.derive_path(&[1, b as u64]);
            let (x, s) = self.train.select_rows(idx);
            let xw = augment(x.view(), &mut batch_rng.derive(0), AugmentKind::Weak, &cfg.augment);
            let xs = augment(x.view(), &mut batch_rng.derive(1), AugmentKind::Strong, &cfg.augment);

            let cache_w = forward_cached(params, xw.view())?;
            let started = cfg.time_pseudo.then(Instant::now);
            let w = self.pseudo(&cache_w.probs, &s, r)?;
            if let Some(t) = started {
                sums.pseudo_ms += t.elapsed().as_secs_f64() * 1e3;
            }
            debug_assert!(w.validate_support(&s).is_ok());

            let per_sample = soft_ce(&cache_w.probs, &w)?;
            let sel = select_reliable(&w, &per_sample, r, rho)?;
            let bad = |detail: String| Error::NonFiniteLoss {
                stage,
                epoch,
                batch: b,
                detail,
            };

            let mut grads = zero_grads(params);
            let (loss_cls, g_cls) = if cfg.restrict_all_to_selected {
                if sel.is_empty() {
                    (0.0, None)
                } else {
                    let sub = cache_w.probs.select_rows(&sel);
                    let ws = w.select_rows(&sel);
                    let l = mean(&soft_ce(&sub, &ws)?);
                    let mut g = Array2::zeros(cache_w.logits.raw_dim());
                    let gs = grad_logits_soft_ce(&sub, &ws)?;
                    for (k, &i) in sel.iter().enumerate() {
                        g.row_mut(i).assign(&gs.row(k));
                    }
                    (l, Some(g))
                }
            } else {
                (mean(&per_sample), Some(grad_logits_soft_ce(&cache_w.probs, &w)?))
            };
            if let Some(g) = g_cls {
                accumulate(&mut grads, &backward(params, &cache_w, g.view()), wc);
            }

            let (mut loss_cons, mut loss_mix) = (0.0, 0.0);
            if !sel.is_empty() {
                let w_sel = w.select_rows(&sel);
                let xs_sel = xs.select(Axis(0), &sel);
                let cache_s = forward_cached(params, xs_sel.view())?;
                loss_cons = mean(&soft_ce(&cache_s.probs, &w_sel)?);
                let g = grad_logits_soft_ce(&cache_s.probs, &w_sel)?;
                accumulate(&mut grads, &backward(params, &cache_s, g.view()), wcons);

                let xw_sel = xw.select(Axis(0), &sel);
                let mixed = mixup_batch(xw_sel.view(), &w_sel, cfg.mixup_alpha, &mut batch_rng.derive(2))?;
                let cache_m = forward_cached(params, mixed.x.view())?;
                loss_mix = mean(&soft_ce(&cache_m.probs, &mixed.w)?);
                let g = grad_logits_soft_ce(&cache_m.probs, &mixed.w)?;
                accumulate(&mut grads, &backward(params, &cache_m, g.view()), wmix);
            }
            for (name, v) in [("classification", loss_cls), ("consistency", loss_cons), ("mixup", loss_mix)] {
                if !v.is_finite() {
                    return Err(bad(format!("{name} loss is {v}")));
                }
            }
            let grads_finite = grads
                .iter()
                .all(|g| g.weights.iter().chain(g.bias.iter()).all(|v| v.is_finite()));
            if !grads_finite {
                return Err(bad("non-finite gradient".into()));
            }
            sgd_momentum_step(params, &grads, lr, cfg.momentum);
            if !params.is_finite() {
                return Err(bad("parameters diverged".into()));
            }
            sums.cls += loss_cls;
            sums.cons += loss_cons;
            sums.mix += loss_mix;
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        sums.cls /= nb;
        sums.cons /= nb;
        sums.mix /= nb;
        Ok(sums)
    }

    fn update_prior(&self, params: &ModelParams, estimator: &mut PriorEstimator, epoch_rng: &Rng) -> Result<()> {
        let xw = augment(
            self.train.features(),
            &mut epoch_rng.derive(2),
            AugmentKind::Weak,
            &self.cfg.augment,
        );
        let (_, p) = forward(params, xw.view())?;
        let w = match estimator.rule() {
            PriorRule::HardPseudo => self.pseudo(&p, &self.train.candidates, estimator.prior())?,
            _ => PseudoLabelMatrix::uniform_over(&self.train.candidates),
        };
        estimator.update(&p, &w)
    }

    fn evaluate(&self, params: &ModelParams) -> Result<GroupAccuracy> {
        let ds = self.test.unwrap_or(self.train);
        let (_, preds) = predict(params, ds.features())?;
        group_accuracy(&preds, &ds.true_labels, &self.train.group_boundaries)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains on `train`, reporting accuracy on `test` (or on `train` when no test
/// split is given) after every epoch of both stages.
pub fn train(train: &PartialDataset, test: Option<&PartialDataset>, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.n_samples() == 0 {
        return Err(Error::EmptyBatch);
    }
    if let Some(t) = test {
        if t.n_classes() != train.n_classes() || t.feature_dim() != train.feature_dim() {
            return Err(Error::shape("test split does not match the training split"));
        }
    }
    let c = train.n_classes();
    let trainer = Trainer {
        train,
        test,
        cfg,
        rng: Rng::new(cfg.seed),
        truth: ClassPrior::from_labels(&train.true_labels, c)?,
    };
    let mut estimator = PriorEstimator::init_uniform(c, cfg.mu_schedule.0, cfg.prior_rule)?;
    let mut metrics = Vec::new();
    if cfg.pre_epochs > 0 {
        trainer.stage(1, cfg.pre_epochs, cfg.mu_schedule.0, &mut estimator, &mut metrics)?;
    }
    let params = trainer.stage(2, cfg.epochs, cfg.mu_schedule.1, &mut estimator, &mut metrics)?;
    Ok(TrainOutput {
        params,
        prior: estimator.prior().clone(),
        metrics,
    })
}
