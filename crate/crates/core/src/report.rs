//! Group accuracies, logit-adjusted prediction, kernel benchmarks and the
//! metrics and benchmark file formats.

use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use crate::datagen::{gen_candidates, Group, GroupBoundaries};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sinkhorn::SinkhornConfig;
use crate::textio::{comment_block, fmt_f64, parse_f64, read_lines, write_file};
use crate::trainer::{pseudo_labels, EpochMetrics, PseudoLabelMethod};
use crate::types::{argmax, clamp_prior, ClassPrior, PlrHyperparams, PredictionMatrix};

/// Test accuracy in percent, overall and per class-size group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupAccuracy {
    pub overall: f64,
    pub many: f64,
    pub medium: f64,
    pub few: f64,
}

/// Percent correct overall and within each group. A group without test
/// samples reports 0.
pub fn group_accuracy(preds: &[usize], truth: &[usize], groups: &GroupBoundaries) -> Result<GroupAccuracy> {
    if preds.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    for (&p, &y) in preds.iter().zip(truth) {
        let g = match groups.group_of(y) {
            Group::Many => 0,
            Group::Medium => 1,
            Group::Few => 2,
        };
        total[g] += 1;
        correct[g] += usize::from(p == y);
    }
    let pct = |c: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 };
    Ok(GroupAccuracy {
        overall: pct(correct.iter().sum(), total.iter().sum()),
        many: pct(correct[0], total[0]),
        medium: pct(correct[1], total[1]),
        few: pct(correct[2], total[2]),
    })
}

/// `argmax_j g_j - phi ln r_j`; ties go to the smaller index.
pub fn logits_adjust_predict(logits: ArrayView2<'_, f64>, r: &ClassPrior, phi: f64) -> Result<Vec<usize>> {
    if logits.ncols() != r.len() {
        return Err(Error::shape(format!("{} logit columns vs prior over {}", logits.ncols(), r.len())));
    }
    let shift = r.ln().mapv(|v| phi * v);
    Ok(logits.outer_iter().map(|row| argmax((&row - &shift).view())).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub method: String,
    pub batch: usize,
    pub classes: usize,
    pub reps: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub n_classes: usize,
    pub reps: usize,
    /// Kernel calls per timed repetition; the record reports seconds per call.
    pub calls_per_rep: usize,
    pub plr: PlrHyperparams,
    /// Iteration cap of the Sinkhorn baseline, always run to the cap.
    pub sinkhorn_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            n_classes: 10,
            reps: 10,
            calls_per_rep: 20,
            plr: PlrHyperparams::default(),
            sinkhorn_iters: 50,
        }
    }
}

struct BenchBatch {
    f: PredictionMatrix,
    s: crate::types::CandidateMatrix,
    r: ClassPrior,
}

fn bench_batch(cfg: &BenchConfig, rng: &mut Rng) -> Result<BenchBatch> {
    let (b, c) = (cfg.batch_size, cfg.n_classes);
    let logits = Array2::from_shape_fn((b, c), |_| 2.0 * rng.normal());
    let f = PredictionMatrix::from_logits(logits.view())?;
    let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
    let s = gen_candidates(&labels, c, 0.5, None, rng)?;
    let raw: Vec<f64> = (0..c)
        .map(|j| if c == 1 { 1.0 } else { 100f64.powf(-(j as f64) / (c - 1) as f64) })
        .collect();
    Ok(BenchBatch {
        f,
        s,
        r: clamp_prior(&raw)?,
    })
}

/// Times the pseudo-label step of each method on one shared random batch:
/// one untimed warm-up repetition, then `reps` timed ones.
pub fn bench_pseudo(methods: &[PseudoLabelMethod], cfg: &BenchConfig, rng: &mut Rng) -> Result<Vec<BenchRecord>> {
    if cfg.reps < 3 {
        return Err(Error::TooFewReps(cfg.reps));
    }
    if cfg.batch_size == 0 || cfg.n_classes == 0 || cfg.calls_per_rep == 0 {
        return Err(Error::invalid("benchmark sizes must be positive"));
    }
    // Zero tolerance is rejected, the smallest positive one never triggers.
    let sinkhorn = SinkhornConfig::new(cfg.sinkhorn_iters, f64::MIN_POSITIVE, cfg.plr.lambda)?;
    let batch = bench_batch(cfg, rng)?;
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let run = || -> Result<()> {
            for _ in 0..cfg.calls_per_rep {
                black_box(pseudo_labels(method, &batch.f, &batch.s, &batch.r, cfg.plr, sinkhorn)?);
            }
            Ok(())
        };
        run()?;
        let mut times = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let t = Instant::now();
            run()?;
            times.push(t.elapsed().as_secs_f64() / cfg.calls_per_rep as f64);
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        out.push(BenchRecord {
            method: method.name().to_string(),
            batch: cfg.batch_size,
            classes: cfg.n_classes,
            reps: cfg.reps,
            mean_s: mean,
            std_s: var.sqrt(),
        });
    }
    Ok(out)
}

pub const BENCH_HEADER: &str = "method,batch,classes,reps,mean_s,std_s";

/// CSV with the fixed header first, then `#` comment lines, then records.
pub fn write_bench(records: &[BenchRecord], path: &Path, comments: &[String]) -> Result<()> {
    let mut out = format!("{BENCH_HEADER}\n");
    out.push_str(&comment_block(comments));
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.batch,
            r.classes,
            r.reps,
            fmt_f64(r.mean_s),
            fmt_f64(r.std_s)
        ));
    }
    write_file(path, &out)
}

pub fn read_bench(path: &Path) -> Result<Vec<BenchRecord>> {
    let lines = read_lines(path)?;
    match lines.first() {
        Some((_, h)) if h == BENCH_HEADER => {}
        _ => return Err(Error::format(path, 1, format!("expected header {BENCH_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (ln, line) in &lines[1..] {
        if line.starts_with('#') {
            continue;
        }
        let bad = || Error::format(path, *ln, format!("malformed benchmark record {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let real = |s: &str| parse_f64(s).ok_or_else(bad);
        out.push(BenchRecord {
            method: f[0].to_string(),
            batch: int(f[1])?,
            classes: int(f[2])?,
            reps: int(f[3])?,
            mean_s: real(f[4])?,
            std_s: real(f[5])?,
        });
    }
    Ok(out)
}

pub const METRICS_HEADER: &str = "plrlab-metrics v1";

fn metrics_line(m: &EpochMetrics) -> String {
    format!(
        "epoch={} lr={} loss_cls={} loss_cons={} loss_mix={} acc_all={} acc_many={} acc_med={} acc_few={} prior_err={} pseudo_ms={}\n",
        m.epoch,
        fmt_f64(m.lr),
        fmt_f64(m.loss_cls),
        fmt_f64(m.loss_cons),
        fmt_f64(m.loss_mix),
        fmt_f64(m.acc.overall),
        fmt_f64(m.acc.many),
        fmt_f64(m.acc.medium),
        fmt_f64(m.acc.few),
        fmt_f64(m.prior_err),
        fmt_f64(m.pseudo_ms),
    )
}

/// Header, `#` comment lines, then one line per epoch. A `# stage=<n>`
/// marker precedes the first epoch of every stage.
pub fn emit_metrics(metrics: &[EpochMetrics], path: &Path, comments: &[String]) -> Result<()> {
    let mut out = format!("{METRICS_HEADER}\n");
    out.push_str(&comment_block(comments));
    let mut stage = None;
    for m in metrics {
        if stage != Some(m.stage) {
            out.push_str(&format!("# stage={}\n", m.stage));
            stage = Some(m.stage);
        }
        out.push_str(&metrics_line(m));
    }
    write_file(path, &out)
}

const METRIC_KEYS: [&str; 11] = [
    "epoch",
    "lr",
    "loss_cls",
    "loss_cons",
    "loss_mix",
    "acc_all",
    "acc_many",
    "acc_med",
    "acc_few",
    "prior_err",
    "pseudo_ms",
];

pub fn parse_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let lines = read_lines(path)?;
    match lines.first() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::format(path, 1, format!("expected header {METRICS_HEADER:?}"))),
    }
    let mut stage = 0;
    let mut out = Vec::new();
    for (ln, line) in &lines[1..] {
        if let Some(c) = line.strip_prefix('#') {
            if let Some(v) = c.trim().strip_prefix("stage=") {
                stage = v
                    .parse()
                    .map_err(|_| Error::format(path, *ln, format!("bad stage marker {v:?}")))?;
            }
            continue;
        }
        let toks: Vec<&str> = line.split(' ').collect();
        if toks.len() != METRIC_KEYS.len() {
            return Err(Error::format(path, *ln, format!("expected {} fields", METRIC_KEYS.len())));
        }
        let mut vals = [0.0; 11];
        let mut epoch = 0;
        for (k, (tok, key)) in toks.iter().zip(METRIC_KEYS).enumerate() {
            let v = tok
                .strip_prefix(key)
                .and_then(|t| t.strip_prefix('='))
                .ok_or_else(|| Error::format(path, *ln, format!("expected field {key}=")))?;
            if k == 0 {
                epoch = v
                    .parse()
                    .map_err(|_| Error::format(path, *ln, format!("bad epoch {v:?}")))?;
            } else {
                vals[k] = parse_f64(v).ok_or_else(|| Error::format(path, *ln, format!("bad {key} value {v:?}")))?;
            }
        }
        out.push(EpochMetrics {
            stage,
            epoch,
            lr: vals[1],
            loss_cls: vals[2],
            loss_cons: vals[3],
            loss_mix: vals[4],
            acc: GroupAccuracy {
                overall: vals[5],
                many: vals[6],
                medium: vals[7],
                few: vals[8],
            },
            prior_err: vals[9],
            pseudo_ms: vals[10],
        });
    }
    Ok(out)
}
