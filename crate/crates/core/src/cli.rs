//! The `dynprop` command line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset, DatasetManifest, Scene, DEFAULT_CLASSES, FORMAT_VERSION};
use crate::detector::{Arch, CheckpointError, Detector, DetectorConfig};
use crate::eval::{
    bench_latency, count_report, evaluate, images_for, sweep, BenchOptions, EvalConfig, BENCH_HEADER, COUNT_HEADER,
    EVAL_HEADER, SWEEP_HEADER,
};
use crate::exec::{init_threads, Execution};
use crate::proposals::Strategy;
use crate::train::{Mode, TrainConfig, TrainError, Trainer};

pub const THREADS_ENV: &str = "DYNPROP_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dynprop", version, about = "Train and measure detectors with switchable and dynamic proposal counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Evaluate AP/AR at one or more proposal configurations.
    Eval(EvalArgs),
    /// Report count-estimator error and configuration accuracy.
    Count(CountArgs),
    /// Measure per-image latency at one or more proposal configurations.
    Bench(BenchArgs),
    /// Evaluate AP and latency over a range of proposal counts.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingArg {
    First,
    Last,
    Bin,
}

impl From<SamplingArg> for Strategy {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::First => Strategy::First,
            SamplingArg::Last => Strategy::Last,
            SamplingArg::Bin => Strategy::Bin,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Individual,
    Switchable,
    Dynamic,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Individual => Mode::Individual,
            ModeArg::Switchable => Mode::Switchable,
            ModeArg::Dynamic => Mode::Dynamic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchArg {
    Query,
    #[value(name = "two_stage", alias = "two-stage")]
    TwoStage,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Query => Arch::Query,
            ArchArg::TwoStage => Arch::TwoStage,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training scenes.
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    /// Number of validation scenes.
    #[arg(long, default_value_t = 500)]
    pub val: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Upper bound of the uniform per-scene object count.
    #[arg(long, default_value_t = crate::data::DEFAULT_MAX_OBJECTS)]
    pub max_objects: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = crate::data::DEFAULT_IMAGE_SIZE)]
    pub size: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Switchable)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = ArchArg::Query)]
    pub arch: ArchArg,
    /// Total proposals N (the fixed count in individual mode).
    #[arg(long, default_value_t = 40)]
    pub proposals: usize,
    /// Number of proposal configurations; individual mode always uses 1.
    #[arg(long, default_value_t = 4)]
    pub theta: usize,
    /// Object count at which the dynamic budget saturates.
    #[arg(long, default_value_t = 10.0)]
    pub k: f64,
    /// Feature distillation; defaults to on for query switchable/dynamic runs.
    #[arg(long, value_enum)]
    pub distill: Option<Switch>,
    /// Task loss on the full-N forward during switchable steps.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub teacher_task: Switch,
    /// Pick the dynamic budget from the true object count.
    #[arg(long)]
    pub oracle_count: bool,
    /// Keep count-loss gradients out of the backbone.
    #[arg(long)]
    pub block_estimator_grad: bool,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Proposal sampling used for reduced budgets during training.
    #[arg(long, value_enum, default_value_t = SamplingArg::First)]
    pub strategy: SamplingArg,
    /// Feature width d.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Refinement stages T (query arch).
    #[arg(long)]
    pub stages: Option<usize>,
    /// Write an intermediate checkpoint every E steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelInput {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Evaluate only the first n scenes of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Proposal counts, comma separated; `auto` uses the count estimator.
    /// Defaults to every configuration of the model.
    #[arg(long, value_delimiter = ',')]
    pub proposals: Vec<String>,
    /// With `auto`, pick the budget from the true object count.
    #[arg(long)]
    pub oracle_count: bool,
    #[arg(long, value_enum, default_value_t = SamplingArg::First)]
    pub sampling: SamplingArg,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CountArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[arg(long, value_delimiter = ',')]
    pub proposals: Vec<String>,
    #[arg(long)]
    pub oracle_count: bool,
    #[arg(long, value_enum, default_value_t = SamplingArg::First)]
    pub sampling: SamplingArg,
    /// Untimed passes before measuring.
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Timed passes over the images.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Number of images timed.
    #[arg(long, default_value_t = 100)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[arg(long)]
    pub from: usize,
    #[arg(long)]
    pub to: usize,
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok());
    init_threads(threads);
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Count(a) => count(&a),
        Command::Bench(a) => bench(&a),
        Command::Sweep(a) => sweep_cmd(&a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Other(e.into())
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    args: &'a A,
    resolved: C,
}

/// Writes the resolved configuration before any work starts.
fn write_sidecar<A: Serialize, C: Serialize>(path: &Path, command: &str, args: &A, resolved: C) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let json = serde_json::to_string_pretty(&Resolved {
        command,
        args,
        resolved,
    })
    .map_err(anyhow::Error::from)?;
    fs::write(path, json + "\n").map_err(io_err)
}

fn sidecar_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.max_objects == 0 {
        return Err(usage("--max-objects must be at least 1"));
    }
    if a.size == 0 {
        return Err(usage("--size must be positive"));
    }
    if a.out.exists() && !a.force {
        let non_empty = fs::read_dir(&a.out).map_err(io_err)?.next().is_some();
        if non_empty {
            return Err(usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                a.out.display()
            )));
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: a.seed,
        train: a.train,
        val: a.val,
        max_objects: a.max_objects,
        classes: DEFAULT_CLASSES,
        image_size: a.size,
    };
    fs::create_dir_all(&a.out).map_err(io_err)?;
    write_sidecar(&a.out.join("gen_data.config.json"), "gen-data", a, &manifest)?;
    let data = Dataset::generate(manifest, Execution::available())?;
    data.save(&a.out)?;
    println!("wrote {} train / {} val scenes to {}", data.train.len(), data.val.len(), a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs, manifest: &DatasetManifest) -> Result<TrainConfig> {
    let arch: Arch = a.arch.into();
    let mode: Mode = a.mode.into();
    let distill = match a.distill {
        Some(s) => s.on(),
        None => arch == Arch::Query && mode != Mode::Individual,
    };
    if distill && arch != Arch::Query {
        return Err(usage("--distill on requires --arch query"));
    }
    if distill && mode == Mode::Individual {
        return Err(usage("--distill on has no effect in individual mode"));
    }
    if a.oracle_count && mode != Mode::Dynamic {
        return Err(usage("--oracle-count applies to dynamic mode only"));
    }
    let mut detector = DetectorConfig {
        arch,
        image_size: manifest.image_size,
        classes: manifest.classes,
        proposals: a.proposals,
        theta: if mode == Mode::Individual { 1 } else { a.theta },
        strategy: a.strategy.into(),
        count_k: a.k,
        ..DetectorConfig::default()
    };
    if let Some(d) = a.dim {
        detector.dim = d;
    }
    if let Some(t) = a.stages {
        detector.stages = t;
    }
    let config = TrainConfig {
        mode,
        detector,
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        distill,
        teacher_task: a.teacher_task.on(),
        oracle_count: a.oracle_count,
        block_estimator_grad: a.block_estimator_grad,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let max_gt = manifest.max_objects;
    let smallest = config.detector.proposals / config.detector.theta;
    if mode != Mode::Individual && max_gt > smallest {
        return Err(usage(format!(
            "dataset allows {max_gt} objects but the smallest configuration has {smallest} proposals"
        )));
    }
    if config.detector.proposals < max_gt {
        return Err(usage(format!(
            "dataset allows {max_gt} objects but the model has {} proposals",
            config.detector.proposals
        )));
    }
    Ok(config)
}

fn train(a: &TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut config = resolve_train_config(a, &data.manifest)?;
    let ckpt = a.out.join("model.ckpt");
    if ckpt.exists() && !a.force {
        return Err(usage(format!("{} exists (use --force to overwrite)", ckpt.display())));
    }
    fs::create_dir_all(&a.out).map_err(io_err)?;
    let init = match &a.init {
        Some(path) => Some(Detector::load(path)?),
        None => None,
    };
    if let Some(det) = &init {
        config.detector = det.config().clone();
    }
    write_sidecar(&a.out.join("train.config.json"), "train", a, &config)?;

    let exec = Execution::available();
    let mut trainer = match init {
        Some(det) => Trainer::with_detector(config, det, exec),
        None => Trainer::new(config, exec).map_err(|e| usage(e.to_string()))?,
    };
    let log_file = fs::File::create(a.out.join("train_log.csv")).map_err(io_err)?;
    let mut log = BufWriter::new(log_file);
    let steps = trainer.config.steps;
    let out = a.out.clone();
    trainer
        .run(&data.train, Some(&mut log), a.checkpoint_every, |det, step| {
            let path = if step == steps {
                out.join("model.ckpt")
            } else {
                out.join(format!("step_{step:06}.ckpt"))
            };
            det.save(&path).map_err(|e| match e {
                CheckpointError::Io(io) => TrainError::Io(io),
                other => TrainError::Config(other.to_string()),
            })
        })
        .map_err(|e| CliError::Other(e.into()))?;
    log.flush().map_err(io_err)?;
    println!(
        "trained {} steps ({} skipped), checkpoint {}",
        trainer.steps_done(),
        trainer.optimizer.skipped,
        ckpt.display()
    );
    Ok(())
}

fn load_input(input: &ModelInput) -> Result<(Detector, Vec<Scene>)> {
    let det = Detector::load(&input.ckpt)?;
    let data = Dataset::load(&input.data)?;
    if data.manifest.image_size != det.config().image_size {
        return Err(CliError::Data(DataError::Manifest(format!(
            "images are {} px but the model expects {} px",
            data.manifest.image_size,
            det.config().image_size
        ))));
    }
    let mut scenes = match input.split {
        SplitArg::Train => data.train,
        SplitArg::Val => data.val,
    };
    if let Some(n) = input.limit {
        scenes.truncate(n);
    }
    if scenes.is_empty() {
        return Err(CliError::Data(DataError::Manifest("split is empty".into())));
    }
    Ok((det, scenes))
}

/// Parses `--proposals` values; empty means every configuration of the model.
fn parse_configs(det: &Detector, raw: &[String], oracle: bool) -> Result<Vec<EvalConfig>> {
    let c = det.config();
    if raw.is_empty() {
        if oracle {
            return Ok(vec![EvalConfig::Oracle]);
        }
        return Ok(c.switch().configurations().into_iter().map(EvalConfig::Fixed).collect());
    }
    raw.iter()
        .map(|v| match v.trim() {
            "auto" if oracle => Ok(EvalConfig::Oracle),
            "auto" => Ok(EvalConfig::Auto),
            n => match n.parse::<usize>() {
                Ok(n) if n >= 1 && n <= c.proposals => Ok(EvalConfig::Fixed(n)),
                _ => Err(usage(format!(
                    "--proposals expects `auto` or an integer in 1..={}, got {n:?}",
                    c.proposals
                ))),
            },
        })
        .collect()
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    fs::write(path, text).map_err(io_err)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (det, scenes) = load_input(&a.input)?;
    let configs = parse_configs(&det, &a.proposals, a.oracle_count)?;
    let labels: Vec<String> = configs.iter().map(|c| c.label(det.config().proposals)).collect();
    write_sidecar(&sidecar_for(&a.out), "eval", a, &labels)?;
    let exec = Execution::available();
    let images = images_for(&det, &scenes, exec);
    let mut rows = Vec::new();
    for cfg in configs {
        let row = evaluate(&det, &scenes, &images, cfg, a.sampling.into(), exec).map_err(anyhow::Error::from)?;
        println!("{}", row.csv_row());
        rows.push(row.csv_row());
    }
    write_csv(&a.out, EVAL_HEADER, rows)
}

fn count(a: &CountArgs) -> Result<()> {
    let (det, scenes) = load_input(&a.input)?;
    write_sidecar(&sidecar_for(&a.out), "count", a, det.config())?;
    let exec = Execution::available();
    let images = images_for(&det, &scenes, exec);
    let report = count_report(&det, &scenes, &images, exec).map_err(anyhow::Error::from)?;
    println!("{}", report.csv_row());
    write_csv(&a.out, COUNT_HEADER, [report.csv_row()])
}

fn bench(a: &BenchArgs) -> Result<()> {
    let (det, scenes) = load_input(&a.input)?;
    let configs = parse_configs(&det, &a.proposals, a.oracle_count)?;
    let opts = BenchOptions {
        warmup: a.warmup.max(5),
        repeats: a.repeats,
        images: a.images,
    };
    write_sidecar(&sidecar_for(&a.out), "bench", a, (opts.warmup, opts.repeats, opts.images))?;
    let images = images_for(&det, &scenes, Execution::available());
    let rows = bench_latency(&det, &scenes, &images, &configs, a.sampling.into(), opts).map_err(anyhow::Error::from)?;
    for r in &rows {
        println!("{}", r.csv_row());
    }
    write_csv(&a.out, BENCH_HEADER, rows.iter().map(|r| r.csv_row()))
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let (det, scenes) = load_input(&a.input)?;
    if a.from == 0 || a.from > a.to || a.step == 0 || a.to > det.config().proposals {
        return Err(usage(format!(
            "invalid sweep range {}..={} step {} (model has {} proposals)",
            a.from,
            a.to,
            a.step,
            det.config().proposals
        )));
    }
    write_sidecar(&sidecar_for(&a.out), "sweep", a, (a.from, a.to, a.step))?;
    let exec = Execution::available();
    let images = images_for(&det, &scenes, exec);
    let opts = BenchOptions {
        warmup: 5,
        repeats: a.repeats,
        images: a.images,
    };
    let rows = sweep(&det, &scenes, &images, (a.from, a.to, a.step), opts, exec).map_err(anyhow::Error::from)?;
    write_csv(&a.out, SWEEP_HEADER, rows.iter().map(|r| r.csv_row()))
}
