//! The `milrank` command line: synthesize data, train, score, evaluate and
//! gradient-check the segment scorer.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use milrank::dataset::{
    load_split, read_features, read_manifest, read_truth, resolve, BagSet, Split, SyntheticConfig, SyntheticData,
    DEFAULT_SEGMENTS,
};
use milrank::eval::{evaluate, load_eval_videos, read_report, EvalLevel, EvalOptions, DEFAULT_THRESHOLD};
use milrank::gradcheck::{check_objective, GradcheckOptions, TOLERANCE};
use milrank::ranking_loss::{LossConfig, LossVariant, SparsityTarget, DEFAULT_MU1, DEFAULT_MU2, DEFAULT_MU3};
use milrank::scorer::{read_model, score_segments, write_model, Activation, DEFAULT_DROPOUT};
use milrank::trainer::{train_from, TrainConfig, TrainStart};
use milrank::{dataset::aggregate_clips_to_segments, Error};

#[derive(Debug, Parser)]
#[command(name = "milrank", version, about = "Weakly supervised MIL ranking for video anomaly scoring")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic planted-anomaly dataset (manifest, features, truth).
    Synth(SynthArgs),
    /// Train a scorer on the train split of a manifest.
    Train(TrainArgs),
    /// Score the segments of one feature file.
    Score(ScoreArgs),
    /// Evaluate a model on the test split of a manifest.
    Eval(EvalArgs),
    /// Check analytic gradients of the training objective against finite differences.
    Gradcheck(GradcheckArgs),
    /// Convert an evaluation report to plot-ready CSV files.
    PlotExport(PlotExportArgs),
}

#[derive(Debug, clap::Args, Serialize)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Feature dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    segments: usize,
    /// Training bags per class.
    #[arg(long, default_value_t = 200)]
    train_bags: usize,
    /// Test bags per class.
    #[arg(long, default_value_t = 50)]
    test_bags: usize,
    /// Distance between the normal and anomalous feature means.
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    /// Fewest anomalous segments per positive bag.
    #[arg(long, default_value_t = 3)]
    k_min: usize,
    /// Most anomalous segments per positive bag.
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    /// Scatter anomalous segments instead of planting one contiguous run.
    #[arg(long)]
    scattered: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LossArg {
    Proposed,
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SparsityArg {
    /// Sum over the normal video's segment scores.
    Negative,
    /// Sum over the abnormal video's segment scores.
    Positive,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ActivationArg {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LevelArg {
    Segment,
    Frame,
}

#[derive(Debug, clap::Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    segments: usize,
    /// Sampled-batch iterations.
    #[arg(long, default_value_t = 25_000)]
    iters: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Temporal smoothness weight.
    #[arg(long, default_value_t = DEFAULT_MU1)]
    mu1: f64,
    /// Sparsity weight.
    #[arg(long, default_value_t = DEFAULT_MU2)]
    mu2: f64,
    /// Weight penalty.
    #[arg(long, default_value_t = DEFAULT_MU3)]
    mu3: f64,
    #[arg(long, default_value_t = DEFAULT_DROPOUT)]
    dropout: f64,
    /// Positive and negative bags per batch, as `P+N`.
    #[arg(long, default_value = "30+30", value_parser = parse_batch)]
    batch: (usize, usize),
    #[arg(long, value_enum, default_value_t = LossArg::Proposed)]
    loss: LossArg,
    #[arg(long, value_enum, default_value_t = SparsityArg::Negative)]
    sparsity_target: SparsityArg,
    /// Hidden layer widths, as `H1,H2`.
    #[arg(long, default_value = "128,32", value_parser = parse_hidden)]
    hidden: (usize, usize),
    /// Activation after the second layer.
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    hidden_activation: ActivationArg,
    /// Adagrad epsilon.
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Checkpoint period in iterations; 0 disables checkpoints.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from the latest checkpoint in `--checkpoint-dir`.
    #[arg(long)]
    resume: bool,
    /// Print the batch loss every this many iterations; 0 is silent.
    #[arg(long, default_value_t = 0)]
    progress_every: usize,
}

#[derive(Debug, clap::Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// `MILF` feature file of one video.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    segments: usize,
    /// Output CSV (`segment_index,score`); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Segment truth CSV; defaults to the manifest's `truth_path`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LevelArg::Segment)]
    level: LevelArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    segments: usize,
    /// Directory for report.json, roc.csv and timelines.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
struct GradcheckArgs {
    /// Random tie-free configurations to check.
    #[arg(long, default_value_t = 20)]
    configs: usize,
}

#[derive(Debug, clap::Args, Serialize)]
struct PlotExportArgs {
    /// report.json written by `eval`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_batch(s: &str) -> Result<(usize, usize), String> {
    let (p, n) = s.split_once('+').ok_or("expected P+N, e.g. 30+30")?;
    Ok((
        p.trim().parse().map_err(|e| format!("positive count: {e}"))?,
        n.trim().parse().map_err(|e| format!("negative count: {e}"))?,
    ))
}

fn parse_hidden(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected H1,H2, e.g. 128,32")?;
    Ok((
        a.trim().parse().map_err(|e| format!("first width: {e}"))?,
        b.trim().parse().map_err(|e| format!("second width: {e}"))?,
    ))
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn print_config(command: &str, seed: u64, resolved: &impl Serialize) {
    let line = serde_json::json!({ "command": command, "seed": seed, "config": resolved });
    eprintln!("config: {line}");
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn synth(seed: u64, args: &SynthArgs) -> CmdResult {
    let cfg = SyntheticConfig {
        dim: args.dim,
        n_segments: args.segments,
        train_bags_per_class: args.train_bags,
        test_bags_per_class: args.test_bags,
        separation: args.separation,
        k_min: args.k_min,
        k_max: args.k_max,
        contiguous: !args.scattered,
        seed,
    };
    print_config("synth", seed, &cfg);
    let data = SyntheticData::generate(&cfg)?;
    let manifest = data.write(&args.out)?;
    println!(
        "wrote {} videos to {}",
        manifest.videos.len(),
        args.out.display()
    );
    Ok(())
}

fn train_config(seed: u64, args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        iterations: args.iters,
        learning_rate: args.lr,
        batch_pos: args.batch.0,
        batch_neg: args.batch.1,
        adagrad_epsilon: args.eps,
        seed,
        loss: LossConfig {
            mu1: args.mu1,
            mu2: args.mu2,
            mu3: args.mu3,
            variant: match args.loss {
                LossArg::Proposed => LossVariant::Proposed,
                LossArg::Baseline => LossVariant::Baseline,
            },
            sparsity_target: match args.sparsity_target {
                SparsityArg::Negative => SparsityTarget::Negative,
                SparsityArg::Positive => SparsityTarget::Positive,
            },
            allow_unequal_lengths: false,
        },
        dropout: args.dropout,
        hidden: [args.hidden.0, args.hidden.1],
        hidden_activation: match args.hidden_activation {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Sigmoid => Activation::Sigmoid,
            ActivationArg::Identity => Activation::Identity,
        },
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: args.checkpoint_dir.clone(),
    }
}

fn train(seed: u64, args: &TrainArgs) -> CmdResult {
    let cfg = train_config(seed, args);
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", args.out.display())));
    print_config(
        "train",
        seed,
        &serde_json::json!({ "train": cfg, "manifest": args.manifest, "out": args.out, "log": log_path,
                             "segments": args.segments, "resume": args.resume }),
    );
    cfg.validate()?;
    if args.segments == 0 {
        return Err(Failure::Validation("invalid segments: must be >= 1".into()));
    }
    let manifest = read_manifest(&args.manifest)?;
    let bags = load_split::<f32>(&manifest, &manifest_dir(&args.manifest), Split::Train, args.segments, None)?;
    let set = BagSet::from_bags(bags.into_iter().map(|(_, b)| b));
    let dim = set
        .dim()
        .ok_or_else(|| Failure::Validation("invalid manifest: train split is empty".into()))?;

    let start = match (&cfg.checkpoint_dir, args.resume) {
        (Some(dir), true) => match TrainStart::from_latest_checkpoint(dir, &cfg)? {
            Some(s) => {
                eprintln!("resuming from iteration {}", s.iteration);
                s
            }
            None => TrainStart::fresh(&cfg, dim)?,
        },
        (None, true) => return Err(Failure::Validation("invalid resume: needs --checkpoint-dir".into())),
        _ => TrainStart::fresh(&cfg, dim)?,
    };
    let every = args.progress_every;
    let outcome = train_from(&set, &cfg, start, |r| {
        if every > 0 && r.iteration % every == 0 {
            eprintln!(
                "iter {:>6}  total {:.6}  l1 {:.4}  l2 {:.4}  l3 {:.4}  l4 {:.4}",
                r.iteration, r.loss.total, r.loss.l1, r.loss.l2, r.loss.l3, r.loss.l4
            );
        }
    })?;
    write_model(&args.out, &outcome.params, None)?;
    outcome.log.write_csv(&log_path)?;
    let last = outcome.log.records.last().map_or(f64::NAN, |r| r.loss.total);
    println!(
        "trained {} iterations; final batch loss {last}; model {}",
        outcome.log.records.len(),
        args.out.display()
    );
    Ok(())
}

fn score(seed: u64, args: &ScoreArgs) -> CmdResult {
    print_config("score", seed, args);
    let model = read_model::<f32>(&args.model)?;
    let features = read_features::<f32>(&args.features)?;
    if features.dim() != model.params.input_dim() {
        return Err(Error::dims("features", model.params.input_dim(), features.dim()).into());
    }
    let segments = aggregate_clips_to_segments(&features, args.segments)?;
    let scores = score_segments(&model.params, &segments)?;
    let mut out = String::from("segment_index,score\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!("{i},{s}\n"));
    }
    match &args.out {
        Some(p) => std::fs::write(p, out).map_err(|e| Failure::from(Error::io(p, e)))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn eval(seed: u64, args: &EvalArgs) -> CmdResult {
    print_config("eval", seed, args);
    let manifest = read_manifest(&args.manifest)?;
    let base = manifest_dir(&args.manifest);
    let truth_path = args
        .truth
        .clone()
        .or_else(|| manifest.truth_path.as_ref().map(|t| resolve(&base, t)));
    let truth = truth_path.map(read_truth).transpose()?;
    let model = read_model::<f32>(&args.model)?;
    let videos = load_eval_videos::<f32>(
        &manifest,
        &base,
        truth.as_ref(),
        args.segments,
        Some(model.params.input_dim()),
    )?;
    let options = EvalOptions {
        level: match args.level {
            LevelArg::Segment => EvalLevel::Segment,
            LevelArg::Frame => EvalLevel::Frame,
        },
        threshold: args.threshold,
    };
    let report = evaluate(&model.params, &videos, &options)?;
    report.write_all(&args.out_dir)?;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}%"));
    println!(
        "auc {:.4}  far_normal {}  far_abnormal {}  miss_rate {}  units {}",
        report.auc,
        pct(report.far_normal_pct),
        pct(report.far_abnormal_pct),
        pct(report.miss_rate_pct),
        report.n_units
    );
    Ok(())
}

fn gradcheck(seed: u64, args: &GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        seed,
        configs: args.configs,
        ..Default::default()
    };
    print_config("gradcheck", seed, &opts);
    let report = check_objective(&opts)?;
    println!(
        "max relative error {:e} over {} entries in {} configurations ({:.2}s)",
        report.max_rel_error, report.entries_checked, report.configs, report.seconds
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "max relative error {:e} exceeds {TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn plot_export(seed: u64, args: &PlotExportArgs) -> CmdResult {
    print_config("plot-export", seed, args);
    let report = read_report(&args.report)?;
    report.write_plot_csvs(&args.out_dir)?;
    println!("wrote roc.csv and timelines.csv to {}", args.out_dir.display());
    Ok(())
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>, Failure> {
    let Ok(v) = std::env::var("MILRANK_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Validation(format!("invalid MILRANK_THREADS: {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| Failure::Validation(format!("thread pool: {e}")))
}

fn dispatch(cli: &Cli) -> CmdResult {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(a) => synth(seed, a),
        Command::Train(a) => train(seed, a),
        Command::Score(a) => score(seed, a),
        Command::Eval(a) => eval(seed, a),
        Command::Gradcheck(a) => gradcheck(seed, a),
        Command::PlotExport(a) => plot_export(seed, a),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 for invalid input, 2 for I/O failures.
pub fn run<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = thread_pool().and_then(|pool| match pool {
        Some(p) => p.install(|| dispatch(&cli)),
        None => dispatch(&cli),
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
