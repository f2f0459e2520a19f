//! Command-line frontend: `gen`, `train`, `eval` and `bench`.
//!
//! Every subcommand accepts `--config <file>` with `key = value` lines named
//! after its long flags. Config values are spliced in ahead of the real
//! arguments, so precedence is defaults < config file < flags. The effective
//! settings (paths excepted) are echoed as `#` comments into every file a
//! command writes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueHint};

use crate::datagen::{generate, read_dataset, write_dataset_with_comments, DatasetSpec, PartialDataset};
use crate::error::{Error, Result};
use crate::prior::PriorRule;
use crate::report::{
    bench_pseudo, emit_metrics, group_accuracy, logits_adjust_predict, write_bench, BenchConfig, GroupAccuracy,
};
use crate::rng::Rng;
use crate::selection::SelectionConfig;
use crate::sinkhorn::SinkhornConfig;
use crate::textio::{comment_block, fmt_f64, read_lines, write_file};
use crate::trainer::{augment::AugmentConfig, read_model, train, write_model, PseudoLabelMethod, TrainConfig};
use crate::trainer::mlp::forward;
use crate::types::PlrHyperparams;

#[derive(Debug, Parser)]
#[command(name = "plrlab", version, about = "Pseudo-label regularization for long-tailed partial-label learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tailed partial-label dataset and its test split.
    Gen(GenArgs),
    /// Train a classifier and write its metrics and model files.
    Train(TrainArgs),
    /// Report group accuracies of a model, optionally with logit adjustment.
    Eval(EvalArgs),
    /// Time the pseudo-label step of each method.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// File of `key = value` defaults for this command.
    #[arg(long, value_hint = ValueHint::FilePath)]
    pub config: Option<PathBuf>,
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Size of the largest class.
    #[arg(long, default_value_t = 500)]
    pub head: usize,
    /// Imbalance ratio between the largest and smallest class.
    #[arg(long, default_value_t = 100.0)]
    pub gamma: f64,
    /// Probability that each wrong label joins a candidate set.
    #[arg(long, default_value_t = 0.5)]
    pub psi: f64,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Distance of the class means from the origin.
    #[arg(long, default_value_t = 4.5)]
    pub separation: f64,
    /// Test samples per class.
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    /// Group consecutive classes into superclasses of this size; candidates
    /// stay inside the true label's superclass.
    #[arg(long)]
    pub superclass_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Training split output; the test split goes next to it as `<stem>.test.<ext>`.
    #[arg(short, long, value_hint = ValueHint::FilePath)]
    pub out: PathBuf,
    /// Test split output, overriding the default location.
    #[arg(long, value_hint = ValueHint::FilePath)]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// File of `key = value` defaults for this command.
    #[arg(long, value_hint = ValueHint::FilePath)]
    pub config: Option<PathBuf>,
    /// Training split.
    #[arg(short, long, value_hint = ValueHint::FilePath)]
    pub data: PathBuf,
    /// Evaluation split. Defaults to `<stem>.test.<ext>` next to the data
    /// when that file exists, else accuracy is measured on the training split.
    #[arg(long, value_hint = ValueHint::FilePath)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Epochs of the prior pre-estimation stage (0 skips it).
    #[arg(long, default_value_t = 100)]
    pub pre_epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Initial learning rate of the cosine schedule.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Hidden layer sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    /// Pseudo-label step: plr, proden or sinkhorn.
    #[arg(long, default_value = "plr")]
    pub solver: PseudoLabelMethod,
    /// Sharpening exponent on the predictions.
    #[arg(long, default_value_t = 3.0)]
    pub lambda: f64,
    /// Strength of the head-class penalty.
    #[arg(long, default_value_t = 2.0)]
    pub m: f64,
    #[arg(long, default_value_t = 50)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub sinkhorn_tol: f64,
    #[arg(long, default_value_t = 0.2)]
    pub rho_start: f64,
    #[arg(long, default_value_t = 0.5)]
    pub rho_end: f64,
    #[arg(long, default_value_t = 50)]
    pub ramp_epochs: usize,
    /// Prior estimate: hard-pred, soft-pred or hard-pseudo.
    #[arg(long, default_value = "hard-pred")]
    pub prior_rule: PriorRule,
    /// Moving-average rate of the prior during pre-estimation.
    #[arg(long, default_value_t = 0.1)]
    pub mu1: f64,
    /// Moving-average rate of the prior during the main stage.
    #[arg(long, default_value_t = 0.01)]
    pub mu2: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weak_sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub strong_sigma: f64,
    /// Per-coordinate dropout of the strong view.
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 4.0)]
    pub mixup_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_cls: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_cons: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_mix: f64,
    /// Keep the prior uniform for the whole run.
    #[arg(long)]
    pub freeze_prior: bool,
    /// Apply the classification loss to the selected samples only.
    #[arg(long)]
    pub restrict_selected: bool,
    /// Record pseudo-label wall-clock time (makes metrics non-reproducible).
    #[arg(long)]
    pub time_pseudo: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "metrics.txt", value_hint = ValueHint::FilePath)]
    pub metrics_out: PathBuf,
    #[arg(long, default_value = "model.txt", value_hint = ValueHint::FilePath)]
    pub model_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// File of `key = value` defaults for this command.
    #[arg(long, value_hint = ValueHint::FilePath)]
    pub config: Option<PathBuf>,
    #[arg(long, value_hint = ValueHint::FilePath)]
    pub model: PathBuf,
    /// Labeled split to evaluate on.
    #[arg(short, long, value_hint = ValueHint::FilePath)]
    pub data: PathBuf,
    /// Logit-adjustment strengths, comma separated; 0 is plain argmax.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub phi: Vec<f64>,
    /// Also write the summary here.
    #[arg(short, long, value_hint = ValueHint::FilePath)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// File of `key = value` defaults for this command.
    #[arg(long, value_hint = ValueHint::FilePath)]
    pub config: Option<PathBuf>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "256")]
    pub batch: Vec<usize>,
    /// Class counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub classes: Vec<usize>,
    /// Timed repetitions per record (at least 3).
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Kernel calls per repetition.
    #[arg(long, default_value_t = 20)]
    pub calls: usize,
    /// Methods to time, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "plr,proden,sinkhorn")]
    pub methods: Vec<PseudoLabelMethod>,
    #[arg(long, default_value_t = 3.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    pub m: f64,
    /// Fixed iteration count of the Sinkhorn baseline.
    #[arg(long, default_value_t = 50)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(short, long, default_value = "bench.csv", value_hint = ValueHint::FilePath)]
    pub out: PathBuf,
}

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_numeric() => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

/// `key = value` pairs of a config file, `#` starting a comment line.
pub fn parse_config(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (ln, line) in read_lines(path)? {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::format(path, ln, "expected `key = value`"))?;
        let k = k.trim().replace('_', "-");
        if k.is_empty() {
            return Err(Error::format(path, ln, "empty key"));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Position and value of `--config` in the arguments after the subcommand.
fn find_config(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(2);
    let mut found = None;
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            found = it.next().map(PathBuf::from);
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
        }
    }
    found
}

/// Splices config-file settings between the subcommand and its flags.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, CliError> {
    if args.len() < 2 {
        return Ok(args);
    }
    let Some(path) = find_config(&args) else {
        return Ok(args);
    };
    let sub = args[1].to_string_lossy().to_string();
    let cmd = Cli::command();
    let Some(sub_cmd) = cmd.find_subcommand(&sub) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in parse_config(&path)? {
        if key == "config" {
            continue;
        }
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("{}: unknown key {key:?} for `{sub}`", path.display())))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(CliError::Usage(format!("{}: {key} must be true or false", path.display()))),
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

/// Effective non-path settings of the subcommand as `key = value` lines.
fn effective_settings(matches: &ArgMatches) -> Vec<String> {
    let Some((name, sub)) = matches.subcommand() else {
        return Vec::new();
    };
    let cmd = Cli::command();
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut out = vec![format!("plrlab {name}")];
    for arg in sub_cmd.get_arguments() {
        if arg.get_value_hint() == ValueHint::FilePath {
            continue;
        }
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if let Ok(Some(raw)) = sub.try_get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            out.push(format!("{long} = {}", vals.join(",")));
        }
    }
    out
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run(args: Vec<OsString>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return report_error(e, stderr),
    };
    let matches = match Cli::command().args_override_self(true).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return 1;
        }
    };
    let settings = effective_settings(&matches);
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, &settings, stdout),
        Command::Train(a) => cmd_train(a, &settings, stdout),
        Command::Eval(a) => cmd_eval(a, &settings, stdout),
        Command::Bench(a) => cmd_bench(a, &settings, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => report_error(e, stderr),
    }
}

fn report_error(e: CliError, stderr: &mut dyn Write) -> i32 {
    let code = e.exit_code();
    let _ = match &e {
        CliError::Usage(msg) => writeln!(stderr, "error: {msg}"),
        CliError::Run(err) => writeln!(stderr, "error: {err}"),
    };
    code
}

/// `<stem>.test.<ext>` next to `path`.
pub fn test_split_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.test.{}", ext.to_string_lossy()),
        None => format!("{stem}.test"),
    };
    path.with_file_name(name)
}

fn out_line(stdout: &mut dyn Write, line: String) {
    let _ = writeln!(stdout, "{line}");
}

fn cmd_gen(a: &GenArgs, settings: &[String], stdout: &mut dyn Write) -> std::result::Result<(), CliError> {
    let hierarchy = match a.superclass_size {
        Some(0) => return Err(CliError::Usage("superclass-size must be positive".into())),
        Some(k) => Some((0..a.classes).map(|j| j / k).collect()),
        None => None,
    };
    let spec = DatasetSpec {
        n_classes: a.classes,
        head_count: a.head,
        imbalance_ratio: a.gamma,
        flip_prob: a.psi,
        feature_dim: a.dim,
        separation: a.separation,
        test_per_class: a.test_per_class,
        hierarchy,
        seed: a.seed,
    };
    let ds = generate(&spec)?;
    let test_out = a.test_out.clone().unwrap_or_else(|| test_split_path(&a.out));
    if test_out == a.out {
        return Err(CliError::Usage("training and test outputs must differ".into()));
    }
    write_dataset_with_comments(&ds.train, &a.out, settings)?;
    write_dataset_with_comments(&ds.test, &test_out, settings)?;
    let counts: Vec<String> = ds.train.class_counts.iter().map(|c| c.to_string()).collect();
    let g = ds.train.group_boundaries;
    out_line(stdout, format!("class_counts={}", counts.join(",")));
    out_line(
        stdout,
        format!("groups many=0..{} medium={}..{} few={}..{}", g.many_end, g.many_end, g.medium_end, g.medium_end, g.n_classes),
    );
    out_line(stdout, format!("mean_candidates={}", fmt_f64(ds.train.candidates.mean_set_size())));
    out_line(stdout, format!("wrote {} and {}", a.out.display(), test_out.display()));
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr0: a.lr,
        momentum: a.momentum,
        hidden: a.hidden.clone(),
        method: a.solver,
        plr: PlrHyperparams::new(a.lambda, a.m)?,
        sinkhorn: SinkhornConfig::new(a.sinkhorn_iters, a.sinkhorn_tol, a.lambda)?,
        selection: SelectionConfig::new(a.rho_start, a.rho_end, a.ramp_epochs)?,
        prior_rule: a.prior_rule,
        mu_schedule: (a.mu1, a.mu2),
        pre_epochs: a.pre_epochs,
        augment: AugmentConfig {
            weak_noise_sigma: a.weak_sigma,
            strong_noise_sigma: a.strong_sigma,
            strong_dropout_p: a.dropout,
        },
        mixup_alpha: a.mixup_alpha,
        loss_weights: (a.w_cls, a.w_cons, a.w_mix),
        freeze_prior: a.freeze_prior,
        restrict_all_to_selected: a.restrict_selected,
        time_pseudo: a.time_pseudo,
        seed: a.seed,
    })
}

fn fmt_acc(acc: &GroupAccuracy) -> String {
    format!(
        "acc_all={} acc_many={} acc_med={} acc_few={}",
        fmt_f64(acc.overall),
        fmt_f64(acc.many),
        fmt_f64(acc.medium),
        fmt_f64(acc.few)
    )
}

fn cmd_train(a: &TrainArgs, settings: &[String], stdout: &mut dyn Write) -> std::result::Result<(), CliError> {
    if a.metrics_out == a.model_out {
        return Err(CliError::Usage("metrics and model outputs must differ".into()));
    }
    let cfg = train_config(a)?;
    let train_ds = read_dataset(&a.data)?;
    let test_path = a.test.clone().or_else(|| {
        let p = test_split_path(&a.data);
        p.exists().then_some(p)
    });
    let test_ds: Option<PartialDataset> = test_path.as_deref().map(read_dataset).transpose()?;
    let out = train(&train_ds, test_ds.as_ref(), &cfg)?;
    emit_metrics(&out.metrics, &a.metrics_out, settings)?;
    write_model(&out.params, &out.prior, &a.model_out, settings)?;
    if let Some(m) = out.final_metrics() {
        out_line(stdout, format!("final stage={} epoch={} {}", m.stage, m.epoch, fmt_acc(&m.acc)));
    }
    let prior: Vec<String> = out.prior.as_slice().iter().map(|v| fmt_f64(*v)).collect();
    out_line(stdout, format!("prior={}", prior.join(",")));
    Ok(())
}

fn cmd_eval(a: &EvalArgs, settings: &[String], stdout: &mut dyn Write) -> std::result::Result<(), CliError> {
    let (params, prior) = read_model(&a.model)?;
    let ds = read_dataset(&a.data)?;
    if ds.feature_dim() != params.input_dim() || ds.n_classes() != params.n_classes() {
        return Err(CliError::Usage(format!(
            "model expects {} features and {} classes, data has {} and {}",
            params.input_dim(),
            params.n_classes(),
            ds.feature_dim(),
            ds.n_classes()
        )));
    }
    let (logits, _) = forward(&params, ds.features())?;
    let mut body = String::new();
    for &phi in &a.phi {
        let preds = logits_adjust_predict(logits.view(), &prior, phi)?;
        let acc = group_accuracy(&preds, &ds.true_labels, &ds.group_boundaries)?;
        let line = format!("phi={} {}", fmt_f64(phi), fmt_acc(&acc));
        out_line(stdout, line.clone());
        body.push_str(&line);
        body.push('\n');
    }
    if let Some(path) = &a.out {
        let mut text = String::from("plrlab-eval v1\n");
        text.push_str(&comment_block(settings));
        text.push_str(&body);
        write_file(path, &text)?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, settings: &[String], stdout: &mut dyn Write) -> std::result::Result<(), CliError> {
    let plr = PlrHyperparams::new(a.lambda, a.m)?;
    let mut rng = Rng::new(a.seed);
    let mut records = Vec::new();
    for &classes in &a.classes {
        for &batch in &a.batch {
            let cfg = BenchConfig {
                batch_size: batch,
                n_classes: classes,
                reps: a.reps,
                calls_per_rep: a.calls,
                plr,
                sinkhorn_iters: a.sinkhorn_iters,
            };
            records.extend(bench_pseudo(&a.methods, &cfg, &mut rng)?);
        }
    }
    write_bench(&records, &a.out, settings)?;
    for r in &records {
        out_line(
            stdout,
            format!(
                "{} batch={} classes={} mean_s={} std_s={}",
                r.method,
                r.batch,
                r.classes,
                fmt_f64(r.mean_s),
                fmt_f64(r.std_s)
            ),
        );
    }
    Ok(())
}
