mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{grid_min, max_gradient_error, random_candidates, random_predictions, random_prior, random_soft_labels, row_objective};
use ndarray::Array2;
use plrlab::datagen::{generate, read_dataset, write_dataset_with_comments, DatasetSpec, GeneratedDataset};
use plrlab::report::{bench_pseudo, emit_metrics, group_accuracy, logits_adjust_predict, parse_metrics, BenchConfig};
use plrlab::solver::hessian_min_eigen_lower_bound;
use plrlab::trainer::{predict, ModelParams, TrainOutput};
use plrlab::types::PlrHyperparams;
use plrlab::{
    kkt_residual, plr_update, proden_update, solar_update, train, CandidateMatrix, ClassPrior, PredictionMatrix,
    PriorEstimator, PriorRule, PseudoLabelMatrix, PseudoLabelMethod, Rng, SinkhornConfig, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn closed_form_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_kkt = 0.0f64;
    let mut min_curvature = f64::INFINITY;
    for _ in 0..200 {
        let c = 1 + rng.below(5);
        let lambda = rng.uniform_range(0.5, 4.0);
        let m = rng.uniform_range(0.0, 3.0);
        let h = PlrHyperparams::new(lambda, m).unwrap();
        let f = random_predictions(&mut rng, 1, c, 2.0);
        let s = random_candidates(&mut rng, 1, c, 0.5);
        let r = random_prior(&mut rng, c);
        let w = plr_update(&f, &s, &r, h).unwrap();
        let f_row = f.row(0).to_vec();
        let closed = row_objective(&w.row(0).to_vec(), &f_row, r.as_slice(), lambda, m);
        let grid = grid_min(&f_row, &s.candidates(0), r.as_slice(), lambda, m, 100);
        worst_gap = worst_gap.max(closed - grid);
        let kkt = kkt_residual(w.values(), &f, &r, h, &s).unwrap();
        worst_kkt = worst_kkt
            .max(kkt.max_stationarity_residual)
            .max(kkt.max_row_sum_violation)
            .max(kkt.max_support_violation);
        min_curvature = min_curvature.min(hessian_min_eigen_lower_bound(&w, &s, h).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_gap <= 1e-9 && worst_kkt <= 1e-8 && min_curvature > 0.0 && secs < 60.0,
        format!(
            "max(objective - grid min) = {worst_gap:.3e} (<= 1e-9), max KKT residual = {worst_kkt:.3e} (<= 1e-8), \
             min Hessian bound = {min_curvature:.3e} (> 0), {secs:.1}s (< 60s)"
        ),
    )
}

fn max_abs_diff(a: &PseudoLabelMatrix, b: &PseudoLabelMatrix) -> f64 {
    a.values().iter().zip(b.values().iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn proden_degeneration() -> Outcome {
    let mut rng = Rng::new(202);
    let mut worst_m0 = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(16);
        let c = 1 + rng.below(10);
        let f = random_predictions(&mut rng, n, c, 3.0);
        let s = random_candidates(&mut rng, n, c, 0.4);
        let r = random_prior(&mut rng, c);
        let base = proden_update(&f, &s).unwrap();
        worst_m0 = worst_m0.max(max_abs_diff(&plr_update(&f, &s, &r, PlrHyperparams::proden()).unwrap(), &base));
        let uniform = ClassPrior::uniform(c).unwrap();
        for m in [0.5, 1.0, 2.0] {
            let w = plr_update(&f, &s, &uniform, PlrHyperparams::new(1.0, m).unwrap()).unwrap();
            worst_uniform = worst_uniform.max(max_abs_diff(&w, &base));
        }
    }
    outcome(
        worst_m0 <= 1e-12 && worst_uniform <= 1e-12,
        format!("max |plr - proden| = {worst_m0:.3e} at M=0, {worst_uniform:.3e} with uniform prior (<= 1e-12)"),
    )
}

/// The head class `j` is the candidate with the largest prior, `k` another
/// candidate with a smaller one, and both get the same prediction.
fn head_punishment() -> Outcome {
    let mut rng = Rng::new(303);
    let mut min_gap = f64::INFINITY;
    let mut min_drop = f64::INFINITY;
    for _ in 0..100 {
        let c = 2 + rng.below(9);
        let r = random_prior(&mut rng, c);
        let s = random_candidates(&mut rng, 1, c, 0.6);
        let mut support = s.candidates(0);
        if support.len() < 2 {
            let extra = (0..c).find(|j| !support.contains(j)).unwrap();
            support.push(extra);
            support.sort_unstable();
        }
        let rv = r.as_slice();
        let j = *support.iter().max_by(|&&a, &&b| rv[a].total_cmp(&rv[b])).unwrap();
        let others: Vec<usize> = support.iter().copied().filter(|&k| rv[k] < rv[j]).collect();
        let k = others[rng.below(others.len())];
        let mut f = Array2::from_shape_fn((1, c), |_| 0.1 + rng.uniform());
        let shared = f[[0, j]].max(f[[0, k]]);
        f[[0, j]] = shared;
        f[[0, k]] = shared;
        let total = f.sum();
        f.mapv_inplace(|v| v / total);
        let f = PredictionMatrix::new(f).unwrap();
        let mut mask = Array2::from_elem((1, c), false);
        for &t in &support {
            mask[[0, t]] = true;
        }
        let s = CandidateMatrix::new(mask).unwrap();
        let mut prev = None;
        for m in [0.5, 1.0, 2.0] {
            let lambda = 3.0;
            let w = plr_update(&f, &s, &r, PlrHyperparams::new(lambda, m).unwrap()).unwrap();
            min_gap = min_gap.min(w.row(0)[k] - w.row(0)[j]);
            if let Some(p) = prev {
                min_drop = min_drop.min(p - w.row(0)[j]);
            }
            prev = Some(w.row(0)[j]);
        }
    }
    outcome(
        min_gap > 1e-12 && min_drop > 1e-12,
        format!("min (w_ik - w_ij) = {min_gap:.3e}, min decrease of w_ij across M = {min_drop:.3e} (both > 1e-12)"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(404);
    let mut params = ModelParams::init(5, &[8], 3, &mut rng).unwrap();
    // the output layer starts at zero; randomize it so every path carries gradient
    for layer in params.layers_mut() {
        layer.weights.mapv_inplace(|_| 0.7 * rng.normal());
        layer.bias.mapv_inplace(|_| 0.3 * rng.normal());
    }
    let x = Array2::from_shape_fn((4, 5), |_| rng.normal());
    let w = random_soft_labels(&mut rng, 4, 3);
    let err = max_gradient_error(&params, &x, &w, 1e-5);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err <= 1e-4 && secs < 5.0,
        format!("max relative error = {err:.3e} (<= 1e-4), {secs:.3}s (< 5s)"),
    )
}

/// Feasible by construction: the prior is the column mean of a strictly
/// positive plan on the candidate support.
fn feasible_instance(rng: &mut Rng) -> (PredictionMatrix, CandidateMatrix, ClassPrior) {
    let n = 2 + rng.below(63);
    let c = 2 + rng.below(9);
    let f = random_predictions(rng, n, c, 2.0);
    let s = random_candidates(rng, n, c, 0.5);
    let mut plan = Array2::zeros((n, c));
    for i in 0..n {
        let mut total = 0.0;
        for j in s.candidates(i) {
            plan[[i, j]] = 0.1 + rng.uniform();
            total += plan[[i, j]];
        }
        for j in 0..c {
            plan[[i, j]] /= total;
        }
    }
    let mut means: Vec<f64> = (0..c).map(|j| plan.column(j).sum() / n as f64).collect();
    // a class outside every candidate set gets no mass
    for (j, v) in means.iter_mut().enumerate() {
        if *v == 0.0 {
            assert!((0..n).all(|i| !s.contains(i, j)));
        }
    }
    let sum: f64 = means.iter().sum();
    means.iter_mut().for_each(|v| *v /= sum);
    // keep only classes that are candidates somewhere, so the floor cannot
    // create an infeasible target
    let used: Vec<usize> = (0..c).filter(|&j| (0..n).any(|i| s.contains(i, j))).collect();
    if used.len() < c {
        let f = f.values().select(ndarray::Axis(1), &used);
        let f = plrlab::types::row_normalize(f.view()).unwrap();
        let bits = s.bits().select(ndarray::Axis(1), &used);
        let r: Vec<f64> = used.iter().map(|&j| means[j]).collect();
        return (
            PredictionMatrix::new(f).unwrap(),
            CandidateMatrix::new(bits).unwrap(),
            ClassPrior::new(r).unwrap(),
        );
    }
    (f, s, ClassPrior::new(means).unwrap())
}

fn sinkhorn_behavior() -> Outcome {
    let mut rng = Rng::new(505);
    let cfg = SinkhornConfig::new(500, 1e-3, 3.0).unwrap();
    let mut max_rise = f64::NEG_INFINITY;
    let mut max_iters = 0;
    let mut unconverged = 0;
    for _ in 0..50 {
        let (f, s, r) = feasible_instance(&mut rng);
        let res = solar_update(&f, &s, &r, cfg).unwrap();
        for pair in res.col_err_history.windows(2) {
            max_rise = max_rise.max(pair[1] - pair[0]);
        }
        max_iters = max_iters.max(res.iterations_used);
        if res.relaxed || res.col_marginal_err > 1e-3 {
            unconverged += 1;
        }
    }
    // a class no sample may take, and a Hall violation: four samples, three
    // of which can only be class 0, under a uniform prior over three classes
    let f2 = PredictionMatrix::new(Array2::from_elem((3, 2), 0.5)).unwrap();
    let s2 = CandidateMatrix::from_rows(&[&[1, 0], &[1, 0], &[1, 0]]).unwrap();
    let r2 = ClassPrior::new(vec![0.5, 0.5]).unwrap();
    let f3 = PredictionMatrix::new(Array2::from_elem((4, 3), 1.0 / 3.0)).unwrap();
    let s3 = CandidateMatrix::from_rows(&[&[1, 0, 0], &[1, 0, 0], &[1, 0, 0], &[1, 1, 1]]).unwrap();
    let r3 = ClassPrior::uniform(3).unwrap();
    let mut infeasible_ok = true;
    let mut worst_row = 0.0f64;
    for (f, s, r) in [(&f2, &s2, &r2), (&f3, &s3, &r3)] {
        let res = solar_update(f, s, r, cfg).unwrap();
        infeasible_ok &= res.relaxed;
        worst_row = worst_row.max(res.row_marginal_err);
    }
    let pass = max_rise <= 0.0 && unconverged == 0 && infeasible_ok && worst_row <= 1e-9;
    outcome(
        pass,
        format!(
            "feasible: max error increase = {max_rise:.3e} (<= 0), {unconverged}/50 missed tol 1e-3, \
             max iterations used = {max_iters} (<= 500); infeasible: relaxed = {infeasible_ok}, \
             max row error = {worst_row:.3e} (<= 1e-9)"
        ),
    )
}

fn runtime_gap() -> Outcome {
    let cfg = BenchConfig {
        batch_size: 256,
        n_classes: 100,
        reps: 10,
        ..BenchConfig::default()
    };
    let methods = [PseudoLabelMethod::Plr, PseudoLabelMethod::Proden, PseudoLabelMethod::Sinkhorn];
    let records = bench_pseudo(&methods, &cfg, &mut Rng::new(606)).unwrap();
    let mean = |name: &str| records.iter().find(|r| r.method == name).unwrap().mean_s;
    let (plr, proden, sinkhorn) = (mean("plr"), mean("proden"), mean("sinkhorn"));
    outcome(
        plr <= sinkhorn / 5.0 && plr <= 3.0 * proden,
        format!(
            "plr {plr:.3e}s, proden {proden:.3e}s, sinkhorn(T=50) {sinkhorn:.3e}s per call; \
             sinkhorn/plr = {:.1} (>= 5), plr/proden = {:.2} (<= 3)",
            sinkhorn / plr,
            plr / proden
        ),
    )
}

struct LongTailRuns {
    datasets: Vec<GeneratedDataset>,
    m0: Vec<TrainOutput>,
    m2: Vec<TrainOutput>,
    full_acc: Vec<f64>,
    secs: f64,
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn long_tail_runs() -> LongTailRuns {
    let start = Instant::now();
    let mut runs = LongTailRuns {
        datasets: Vec::new(),
        m0: Vec::new(),
        m2: Vec::new(),
        full_acc: Vec::new(),
        secs: 0.0,
    };
    for seed in SEEDS {
        let spec = DatasetSpec {
            seed,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        for m in [0.0, 2.0] {
            let cfg = TrainConfig {
                plr: PlrHyperparams::new(3.0, m).unwrap(),
                ..base.clone()
            };
            let out = train(&ds.train, Some(&ds.test), &cfg).unwrap();
            if m == 0.0 {
                runs.m0.push(out);
            } else {
                runs.m2.push(out);
            }
        }
        let full = train(&ds.train.fully_supervised(), Some(&ds.test), &base).unwrap();
        runs.full_acc.push(full.final_metrics().unwrap().acc.overall);
        runs.datasets.push(ds);
    }
    runs.secs = start.elapsed().as_secs_f64();
    runs
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn tail_gain(runs: &LongTailRuns) -> Outcome {
    let pick = |outs: &[TrainOutput], few: bool| -> Vec<f64> {
        outs.iter()
            .map(|o| {
                let acc = o.final_metrics().unwrap().acc;
                if few { acc.few } else { acc.overall }
            })
            .collect()
    };
    let (few0, few2) = (mean(&pick(&runs.m0, true)), mean(&pick(&runs.m2, true)));
    let (all0, all2) = (mean(&pick(&runs.m0, false)), mean(&pick(&runs.m2, false)));
    let full = mean(&runs.full_acc);
    let pass = few2 - few0 >= 10.0 && all2 - all0 >= -2.0 && (85.0..=95.0).contains(&full) && runs.secs < 600.0;
    outcome(
        pass,
        format!(
            "fully supervised {full:.1}% (85..95); few M=0 {few0:.1} vs M=2 {few2:.1}, gain {:.1} (>= 10); \
             overall M=0 {all0:.1} vs M=2 {all2:.1}, change {:.1} (>= -2); {:.0}s (< 600s)",
            few2 - few0,
            all2 - all0,
            runs.secs
        ),
    )
}

fn prior_convergence() -> Outcome {
    let ds = generate(&DatasetSpec::default()).unwrap();
    let labels = &ds.train.true_labels;
    let c = ds.train.n_classes();
    let truth = ClassPrior::from_labels(labels, c).unwrap();
    let onehot = PseudoLabelMatrix::one_hot(labels, c).unwrap();
    let p = PredictionMatrix::new(onehot.values().to_owned()).unwrap();
    let mut on_simplex = true;
    let mut needed = Vec::new();
    for mu in [0.1, 0.9] {
        let mut est = PriorEstimator::init_uniform(c, mu, PriorRule::HardPred).unwrap();
        let mut hit = None;
        for k in 1..=70 {
            est.update(&p, &onehot).unwrap();
            if est.prior_error(&truth).unwrap() <= 1e-3 {
                hit = Some(k);
                break;
            }
        }
        needed.push(hit);
    }
    let mut rng = Rng::new(808);
    for rule in [PriorRule::HardPred, PriorRule::SoftPred, PriorRule::HardPseudo] {
        let mut est = PriorEstimator::init_uniform(c, 0.1, rule).unwrap();
        for _ in 0..70 {
            let p = random_predictions(&mut rng, 64, c, 4.0);
            let w = random_soft_labels(&mut rng, 64, c);
            est.update(&p, &w).unwrap();
            let r = est.prior().as_slice();
            on_simplex &= (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && r.iter().all(|&v| v > 0.0);
        }
    }
    let show = |h: Option<usize>| h.map_or("never".to_string(), |k| k.to_string());
    outcome(
        needed[0].is_some() && needed[1].is_some() && on_simplex,
        format!(
            "updates to error <= 1e-3: {} at mu=0.1, {} at mu=0.9 (<= 70); simplex kept by all rules: {on_simplex}",
            show(needed[0]),
            show(needed[1])
        ),
    )
}

fn logit_adjustment(runs: &LongTailRuns) -> Outcome {
    let phis = [0.0, 0.3, 0.5, 0.7, 1.0];
    let mut few_by_phi = vec![0.0; phis.len()];
    for (ds, out) in runs.datasets.iter().zip(&runs.m0) {
        let (logits, _) = predict(&out.params, ds.test.features()).unwrap();
        for (slot, &phi) in few_by_phi.iter_mut().zip(&phis) {
            let preds = logits_adjust_predict(logits.view(), &out.prior, phi).unwrap();
            let acc = group_accuracy(&preds, &ds.test.true_labels, &ds.test.group_boundaries).unwrap();
            *slot += acc.few / runs.m0.len() as f64;
        }
    }
    let (best_idx, best_few) = few_by_phi
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let upward = few_by_phi[2] > few_by_phi[1];
    let m2_few = mean(&runs.m2.iter().map(|o| o.final_metrics().unwrap().acc.few).collect::<Vec<_>>());
    let sweep: Vec<String> = phis.iter().zip(&few_by_phi).map(|(p, v)| format!("{p}:{v:.1}")).collect();
    outcome(
        (upward || best_few > few_by_phi[0]) && m2_few > best_few,
        format!(
            "M=0 few by phi [{}]; best phi {} ({best_few:.1} vs {:.1} at phi=0, rises 0.3->0.5: {upward}); \
             M=2 few {m2_few:.1} > {best_few:.1}",
            sweep.join(" "),
            phis[best_idx],
            few_by_phi[0]
        ),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_plrlab"))
        .args(args)
        .current_dir(dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            if l.starts_with('#') || l.starts_with("method,") {
                l.to_string()
            } else {
                l.split(',').take(4).collect::<Vec<_>>().join(",")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn timings_positive(csv: &str) -> bool {
    csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("method,")).all(|l| {
        let cols: Vec<&str> = l.split(',').collect();
        cols.len() == 6 && cols[4].parse::<f64>().is_ok_and(|v| v > 0.0) && cols[5].parse::<f64>().is_ok_and(|v| v >= 0.0)
    })
}

fn determinism_and_round_trips() -> Outcome {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut all_ran = true;
    for dir in &dirs {
        let d = dir.path();
        all_ran &= run_cli(&["gen", "--seed", "7", "-o", "ds.txt"], d);
        all_ran &= run_cli(&["train", "-d", "ds.txt", "--epochs", "5", "--pre-epochs", "5", "--seed", "7"], d);
        all_ran &= run_cli(&["eval", "--model", "model.txt", "-d", "ds.test.txt", "--phi", "0,0.5,1", "-o", "eval.txt"], d);
        all_ran &= run_cli(&["bench", "--batch", "64", "--reps", "3", "--seed", "7", "-o", "bench.csv"], d);
    }
    let mut differing = Vec::new();
    for name in ["ds.txt", "ds.test.txt", "metrics.txt", "model.txt", "eval.txt"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap_or_default();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap_or_default();
        if a.is_empty() || a != b {
            differing.push(name);
        }
    }
    let bench: Vec<String> = dirs
        .iter()
        .map(|d| std::fs::read_to_string(d.path().join("bench.csv")).unwrap_or_default())
        .collect();
    if bench[0].is_empty() || strip_timing(&bench[0]) != strip_timing(&bench[1]) || !timings_positive(&bench[0]) {
        differing.push("bench.csv");
    }

    // library round trips
    let scratch = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        seed: 9,
        hierarchy: Some((0..10).map(|j| j / 2).collect()),
        ..DatasetSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let comments = vec!["seed = 9".to_string()];
    let p1 = scratch.path().join("a.txt");
    let p2 = scratch.path().join("b.txt");
    write_dataset_with_comments(&ds.train, &p1, &comments).unwrap();
    let back = read_dataset(&p1).unwrap();
    write_dataset_with_comments(&back, &p2, &comments).unwrap();
    let dataset_exact = back.features == ds.train.features
        && back.true_labels == ds.train.true_labels
        && back.candidates == ds.train.candidates
        && std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        pre_epochs: 3,
        ..TrainConfig::default()
    };
    let out = train(&ds.train, Some(&ds.test), &cfg).unwrap();
    let m1 = scratch.path().join("m1.txt");
    let m2 = scratch.path().join("m2.txt");
    emit_metrics(&out.metrics, &m1, &comments).unwrap();
    let parsed = parse_metrics(&m1).unwrap();
    emit_metrics(&parsed, &m2, &comments).unwrap();
    let metrics_exact = parsed == out.metrics && std::fs::read(&m1).unwrap() == std::fs::read(&m2).unwrap();

    outcome(
        all_ran && differing.is_empty() && dataset_exact && metrics_exact,
        format!(
            "commands succeeded: {all_ran}; files differing across runs: [{}]; \
             dataset round trip exact: {dataset_exact}; metrics round trip exact: {metrics_exact}",
            differing.join(", ")
        ),
    )
}

fn main() {
    let runs = long_tail_runs();
    let results = [
        closed_form_optimality(),
        proden_degeneration(),
        head_punishment(),
        gradient_check(),
        sinkhorn_behavior(),
        runtime_gap(),
        tail_gain(&runs),
        prior_convergence(),
        logit_adjustment(&runs),
        determinism_and_round_trips(),
    ];
    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        println!("criterion {} {}: {}", i + 1, if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
