use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stressnet::dataset::{self, BuildOptions, ClassVectors, LengthPolicy, LongRecording, MissingTask, NormScope};
use stressnet::network::{self, CheckpointError, NetworkError};
use stressnet::signal::Cheby2Bandpass;
use stressnet::sweep::{self, ExperimentError, ExperimentSpec, ReportFormat, SweepError, SweepOptions};
use stressnet::trainer::{self, Confusion, TrainError};
use stressnet::{NetworkConfig, SplitMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "stressnet", version, about = "CNN-MLP stress classification from PPG recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset tree (s<i>/bvp_s<i>_T1.csv, _T2.csv).
    Synth(SynthArgs),
    /// Build the class matrices from a dataset tree and cache them.
    Prepare(PrepareArgs),
    /// Train one configuration and save a checkpoint.
    Train(TrainArgs),
    /// Re-evaluate a checkpoint on the split it was trained with.
    Eval(EvalArgs),
    /// Train every row of a structure grid.
    Sweep(SweepArgs),
    /// Compare backprop gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one configuration on raw and band-passed data.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 56)]
    subjects: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FilterKind {
    Cheby2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    PerVector,
    Global,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LongArg {
    Truncate,
    Reject,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MissingArg {
    Skip,
    Fail,
}

#[derive(Debug, Clone, Args)]
struct BuildArgs {
    #[arg(long, value_enum)]
    filter: Option<FilterKind>,
    #[arg(long, value_enum, default_value = "per-vector")]
    norm: NormArg,
    /// Recordings longer than 11520 samples.
    #[arg(long, value_enum, default_value = "truncate")]
    long: LongArg,
    /// Subjects lacking one of the two task recordings.
    #[arg(long, value_enum, default_value = "skip")]
    missing: MissingArg,
    #[arg(long, default_value_t = 4)]
    filter_order: usize,
    #[arg(long, default_value_t = 0.2)]
    filter_low: f64,
    #[arg(long, default_value_t = 12.0)]
    filter_high: f64,
    #[arg(long, default_value_t = 40.0)]
    filter_atten: f64,
}

impl BuildArgs {
    fn bandpass(&self) -> Cheby2Bandpass {
        Cheby2Bandpass {
            order: self.filter_order,
            low_hz: self.filter_low,
            high_hz: self.filter_high,
            stop_atten_db: self.filter_atten,
        }
    }

    fn options(&self, filtered: bool) -> BuildOptions {
        BuildOptions {
            policy: LengthPolicy {
                long: match self.long {
                    LongArg::Truncate => LongRecording::Truncate,
                    LongArg::Reject => LongRecording::Reject,
                },
                missing: match self.missing {
                    MissingArg::Skip => MissingTask::SkipIncomplete,
                    MissingArg::Fail => MissingTask::Fail,
                },
            },
            norm: match self.norm {
                NormArg::PerVector => NormScope::PerVector,
                NormArg::Global => NormScope::Global,
            },
            filter: filtered.then(|| self.bandpass()),
        }
    }
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false, id = "source")]
struct DataSource {
    /// Dataset tree root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cache written by `prepare`.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    build: BuildArgs,
}

#[derive(Debug, Clone, Copy, Args)]
struct NetArgs {
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Frame size in samples.
    #[arg(long = "Fsize", default_value_t = 1024)]
    frame_size: usize,
    /// Kernel length.
    #[arg(long = "fsize", default_value_t = 512)]
    filter_size: usize,
    #[arg(long, default_value_t = 8)]
    ss: usize,
    #[arg(long, default_value_t = 2)]
    stride: usize,
}

impl NetArgs {
    fn config(&self) -> NetworkConfig {
        NetworkConfig::new(self.n, self.m, self.frame_size, self.filter_size, self.ss, self.stride)
    }
}

#[derive(Debug, Clone, Copy, Args)]
struct FitArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    delta_lms: f64,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.4)]
    train_frac: f64,
}

impl FitArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            delta_lms_threshold: self.delta_lms,
            learning_rate: self.lr,
            patience: self.patience,
            val_fraction: self.val_frac,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Frame,
    Subject,
}

impl From<SplitArg> for SplitMode {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Frame => SplitMode::FrameLevel,
            SplitArg::Subject => SplitMode::SubjectLevel,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    build: BuildArgs,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value = "frame")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the result as one row of the sweep TSV schema.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    build: BuildArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitsArg {
    Frame,
    Subject,
    Both,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    build: BuildArgs,
    /// `table2` or a JSON grid file.
    #[arg(long, default_value = "table2")]
    grid: String,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    md: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value = "frame")]
    split: SplitsArg,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long = "Fsize", default_value_t = 64)]
    frame_size: usize,
    #[arg(long = "fsize", default_value_t = 8)]
    filter_size: usize,
    #[arg(long, default_value_t = 2)]
    ss: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Dataset tree; both arms are built from it.
    #[arg(long, conflicts_with_all = ["raw_cache", "filtered_cache"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "filtered_cache")]
    raw_cache: Option<PathBuf>,
    #[arg(long, requires = "raw_cache")]
    filtered_cache: Option<PathBuf>,
    #[command(flatten)]
    build: BuildArgs,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value = "frame")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Network(n) => n.into(),
            ExperimentError::Data(d) => data_err(d),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            TrainError::Network(n) => n.into(),
            _ => data_err(e),
        }
    }
}

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Infeasible { .. } | NetworkError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => data_err(e),
        }
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Io(_) | SweepError::AllFailed(_) | SweepError::Parse { .. } | SweepError::Pool(_) => data_err(e),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        data_err(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_vectors(source: &DataSource, build: &BuildArgs) -> Result<ClassVectors, Failure> {
    match (&source.data, &source.cache) {
        (Some(root), None) => load_tree(root, build, build.filter.is_some()),
        (None, Some(cache)) => dataset::load_cache(cache).map_err(data_err),
        _ => Err(Failure::Usage("exactly one of --data and --cache is required".into())),
    }
}

fn load_tree(root: &Path, build: &BuildArgs, filtered: bool) -> Result<ClassVectors, Failure> {
    let vectors = dataset::build_class_vectors(root, &build.options(filtered)).map_err(data_err)?;
    log::info!(
        "loaded {} subjects from {} ({} skipped)",
        vectors.subject_count(),
        root.display(),
        vectors.skipped.len()
    );
    Ok(vectors)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(data_err)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn pct(a: f64) -> String {
    sweep::format_percent(a)
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    if a.subjects == 0 || a.subjects as usize > dataset::MAX_SUBJECTS {
        return Err(Failure::Usage(format!(
            "--subjects must lie in 1..={}",
            dataset::MAX_SUBJECTS
        )));
    }
    dataset::write_synthetic_tree(&a.out, a.subjects, a.seed).map_err(data_err)?;
    println!("wrote {} synthetic subjects to {}", a.subjects, a.out.display());
    Ok(())
}

fn cmd_prepare(a: PrepareArgs) -> CliResult {
    let vectors = load_tree(&a.data, &a.build, a.build.filter.is_some())?;
    for w in &vectors.warnings {
        eprintln!("warning: {w}");
    }
    dataset::save_cache(&vectors, &a.cache).map_err(data_err)?;
    println!(
        "cached {} subjects per class ({}, {}) to {}",
        vectors.subject_count(),
        if vectors.filter.is_some() { "cheby2 band-pass" } else { "unfiltered" },
        match vectors.norm {
            NormScope::PerVector => "per-vector normalization",
            NormScope::Global => "global normalization",
        },
        a.cache.display()
    );
    Ok(())
}

/// Stored in checkpoints so `eval` can rebuild the same split.
#[derive(Debug, Serialize, serde::Deserialize)]
struct Provenance {
    spec: ExperimentSpec,
    filter: Option<Cheby2Bandpass>,
    norm: NormScope,
    subject_ids: Vec<u32>,
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let vectors = load_vectors(&a.source, &a.build)?;
    let spec = ExperimentSpec {
        network: a.net.config(),
        train: a.fit.train_config(a.seed),
        split: a.split.into(),
        train_fraction: a.fit.train_frac,
    };
    spec.network.geometry()?;
    let (model, _, report) = sweep::run_experiment(&vectors, &spec)?;
    let provenance = Provenance {
        spec,
        filter: vectors.filter,
        norm: vectors.norm,
        subject_ids: vectors.non_stress.subject_ids(),
    };
    let annotations = serde_json::to_value(&provenance).map_err(data_err)?;
    network::save_model_annotated(&model, &annotations, &a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    if let Some(path) = &a.tsv {
        std::fs::write(path, sweep::train_report_tsv(&spec, &report)).map_err(data_err)?;
    }
    println!(
        "train {}%  test {}%  epochs {}  stop {}",
        pct(report.train_accuracy),
        pct(report.test_accuracy),
        report.epochs_run,
        report.stop_reason.as_str()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    version: u32,
    config: NetworkConfig,
    split: SplitMode,
    train_accuracy: f64,
    test_accuracy: f64,
    train_confusion: Confusion,
    confusion: Confusion,
    train_frames: usize,
    test_frames: usize,
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (model, annotations) = network::load_model_annotated(&a.model)?;
    let provenance: Provenance = serde_json::from_value(annotations)
        .map_err(|e| data_err(format!("checkpoint lacks split provenance: {e}")))?;
    let vectors = load_vectors(&a.source, &a.build)?;
    if vectors.non_stress.subject_ids() != provenance.subject_ids {
        log::warn!("subject set differs from the one the model was trained on");
    }
    let split = sweep::prepare_split(&vectors, &provenance.spec)?;
    let train = trainer::evaluate(&model, &split.train)?;
    let test = trainer::evaluate(&model, &split.test)?;
    let report = EvalReport {
        version: trainer::REPORT_VERSION,
        config: model.config,
        split: split.mode,
        train_accuracy: train.accuracy,
        test_accuracy: test.accuracy,
        train_confusion: train.confusion,
        confusion: test.confusion,
        train_frames: split.train.len(),
        test_frames: split.test.len(),
    };
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    println!("train {}%  test {}%", pct(train.accuracy), pct(test.accuracy));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let train = a.fit.train_config(0);
    let grid = if a.grid == "table2" {
        let mut g = sweep::table2_grid().with_train_config(train);
        g.base_seed = a.base_seed;
        g
    } else {
        let text = std::fs::read_to_string(&a.grid).map_err(|e| Failure::Usage(format!("{}: {e}", a.grid)))?;
        sweep::parse_grid(&text, train, a.base_seed)?
    };
    let vectors = load_vectors(&a.source, &a.build)?;
    let opts = SweepOptions {
        splits: match a.split {
            SplitsArg::Frame => vec![SplitMode::FrameLevel],
            SplitsArg::Subject => vec![SplitMode::SubjectLevel],
            SplitsArg::Both => vec![SplitMode::FrameLevel, SplitMode::SubjectLevel],
        },
        train_fraction: a.fit.train_frac,
        jobs: a.jobs,
    };
    let report = sweep::run_sweep(&grid, &vectors, &opts)?;
    sweep::emit_report(&report, ReportFormat::Tsv, &a.out)?;
    std::fs::write(sweep::timing_path(&a.out), sweep::render_timing(&report)).map_err(data_err)?;
    if let Some(md) = &a.md {
        sweep::emit_report(&report, ReportFormat::Markdown, md)?;
    }
    for split in &opts.splits {
        if let Some(best) = report.best(*split) {
            println!(
                "best {}-level test accuracy {}% (row {})",
                split.label(),
                pct(best.test_accuracy().unwrap_or(0.0)),
                best.index + 1
            );
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let config = NetworkConfig::new(a.n, a.m, a.frame_size, a.filter_size, a.ss, 1);
    let report = trainer::gradient_check(&config, a.seed, a.tol)?;
    for l in &report.layers {
        println!("{:<8} {:>6} params  max rel error {:.3e}", l.name, l.params, l.max_rel_error);
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    if report.passed {
        println!("gradient check passed ({:.3e} < {:.0e})", report.max_rel_error, report.tolerance);
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let (raw, filtered) = match (&a.data, &a.raw_cache, &a.filtered_cache) {
        (Some(root), None, None) => (load_tree(root, &a.build, false)?, load_tree(root, &a.build, true)?),
        (None, Some(r), Some(f)) => (
            dataset::load_cache(r).map_err(data_err)?,
            dataset::load_cache(f).map_err(data_err)?,
        ),
        _ => {
            return Err(Failure::Usage(
                "give either --data or both --raw-cache and --filtered-cache".into(),
            ))
        }
    };
    if raw.filter.is_some() || filtered.filter.is_none() {
        return Err(Failure::Usage(
            "the raw arm must be unfiltered and the filtered arm band-passed".into(),
        ));
    }
    let spec = ExperimentSpec {
        network: a.net.config(),
        train: a.fit.train_config(a.seed),
        split: a.split.into(),
        train_fraction: a.fit.train_frac,
    };
    spec.network.geometry()?;
    let report = sweep::run_ablation(&raw, &filtered, &spec)?;
    write_json(&a.report, &report)?;
    println!(
        "raw test {}%  filtered test {}%  delta {:+.1} points",
        pct(report.raw.test_accuracy),
        pct(report.filtered.test_accuracy),
        report.delta_test_accuracy * 100.0
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
