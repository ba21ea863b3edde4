//! Experiment runner: a single configuration end to end, a grid of them in
//! parallel, report rendering, and the filtered-vs-raw ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, ClassVectors, DataError, DatasetSplit, SplitMode};
use crate::network::{self, ModelState, NetworkConfig, NetworkError};
use crate::seed;
use crate::trainer::{self, StopReason, TrainConfig, TrainError, TrainReport};

const SPLIT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl ExperimentError {
    /// Divergence and similar failures of the optimisation itself, as
    /// opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, ExperimentError::Train(TrainError::Diverged { .. }))
    }
}

/// Everything needed to reproduce one run from class vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub split: SplitMode,
    pub train_fraction: f64,
}

impl ExperimentSpec {
    pub fn split_seed(&self) -> u64 {
        seed::derive_seed(self.train.seed, SPLIT_STREAM)
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive_seed(self.train.seed, INIT_STREAM)
    }
}

/// Frames and splits the vectors the way `spec` prescribes.
pub fn prepare_split(vectors: &ClassVectors, spec: &ExperimentSpec) -> Result<DatasetSplit, ExperimentError> {
    let frames = dataset::make_labeled_frames(
        &vectors.non_stress,
        &vectors.stress,
        spec.network.frame_size,
        spec.network.stride,
    )?;
    Ok(dataset::split_train_test(&frames, spec.train_fraction, spec.split_seed(), spec.split)?)
}

pub fn run_experiment(
    vectors: &ClassVectors,
    spec: &ExperimentSpec,
) -> Result<(ModelState, DatasetSplit, TrainReport), ExperimentError> {
    let model = network::build_network(spec.network, spec.init_seed())?;
    let split = prepare_split(vectors, spec)?;
    let (model, report) = trainer::train(model, &split, &spec.train)?;
    Ok((model, split, report))
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("repeats must be at least 1")]
    ZeroRepeats,
    #[error("grid row {index} is infeasible: {source}")]
    Infeasible { index: usize, source: NetworkError },
    #[error("no split modes requested")]
    NoSplits,
    #[error("every sweep row failed; first error: {0}")]
    AllFailed(String),
    #[error("invalid grid file: {0}")]
    GridFile(String),
    #[error("malformed report line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub network: NetworkConfig,
    /// Training settings; the seed is replaced per row.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    rows: Vec<GridRow>,
    pub base_seed: u64,
    pub repeats: usize,
}

impl SweepGrid {
    pub fn new(rows: Vec<GridRow>, base_seed: u64, repeats: usize) -> Result<Self, SweepError> {
        if rows.is_empty() {
            return Err(SweepError::EmptyGrid);
        }
        if repeats == 0 {
            return Err(SweepError::ZeroRepeats);
        }
        for (index, row) in rows.iter().enumerate() {
            row.network
                .geometry()
                .map_err(|source| SweepError::Infeasible { index, source })?;
        }
        Ok(Self {
            rows,
            base_seed,
            repeats,
        })
    }

    pub fn rows(&self) -> &[GridRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Replaces the training settings of every row.
    pub fn with_train_config(mut self, train: TrainConfig) -> Self {
        for row in &mut self.rows {
            row.train = train;
        }
        self
    }
}

/// The nine reported (n, m, Fsize, fsize, SS, st) structures, in order.
pub const TABLE2_ROWS: [(usize, usize, usize, usize, usize, usize); 9] = [
    (3, 2, 64, 16, 2, 24),
    (3, 2, 128, 32, 2, 24),
    (2, 2, 512, 64, 2, 24),
    (2, 2, 1024, 128, 2, 24),
    (2, 2, 1024, 512, 4, 24),
    (2, 2, 1024, 512, 4, 12),
    (2, 2, 1024, 512, 4, 5),
    (2, 2, 1024, 512, 6, 5),
    (2, 2, 1024, 512, 8, 2),
];

pub fn table2_grid() -> SweepGrid {
    let rows = TABLE2_ROWS
        .iter()
        .map(|&(n, m, fs, f, ss, st)| GridRow {
            network: NetworkConfig::new(n, m, fs, f, ss, st),
            train: TrainConfig::default(),
        })
        .collect();
    SweepGrid::new(rows, 0, 1).expect("reported structures are feasible")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFileRow {
    n: usize,
    m: usize,
    #[serde(rename = "Fsize")]
    frame_size: usize,
    #[serde(rename = "fsize")]
    filter_size: usize,
    #[serde(rename = "SS")]
    subsampling: usize,
    #[serde(rename = "st")]
    stride: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    rows: Vec<GridFileRow>,
    #[serde(default = "one")]
    repeats: usize,
}

fn one() -> usize {
    1
}

/// Parses a JSON grid: `{"rows": [{"n":2,"m":2,"Fsize":256,"fsize":32,"SS":2,"st":24}], "repeats": 1}`.
pub fn parse_grid(json: &str, train: TrainConfig, base_seed: u64) -> Result<SweepGrid, SweepError> {
    let file: GridFile = serde_json::from_str(json).map_err(|e| SweepError::GridFile(e.to_string()))?;
    let rows = file
        .rows
        .into_iter()
        .map(|r| GridRow {
            network: NetworkConfig::new(r.n, r.m, r.frame_size, r.filter_size, r.subsampling, r.stride),
            train,
        })
        .collect();
    SweepGrid::new(rows, base_seed, file.repeats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RowOutcome {
    Completed {
        train_accuracy: f64,
        test_accuracy: f64,
        epochs_run: usize,
        stop_reason: StopReason,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Position of the configuration in the grid.
    pub index: usize,
    pub repeat: usize,
    pub split: SplitMode,
    pub network: NetworkConfig,
    pub seed: u64,
    pub outcome: RowOutcome,
    /// Not part of the rendered report; see [`timing_path`].
    pub wall_time_s: f64,
}

impl SweepRow {
    pub fn test_accuracy(&self) -> Option<f64> {
        match self.outcome {
            RowOutcome::Completed { test_accuracy, .. } => Some(test_accuracy),
            RowOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Highest test accuracy under `split`; ties go to the earlier row.
    pub fn best(&self, split: SplitMode) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .filter_map(|r| r.test_accuracy().map(|a| (a, r)))
            .fold(None, |best: Option<(f64, &SweepRow)>, (a, r)| match best {
                Some((b, _)) if b >= a => best,
                _ => Some((a, r)),
            })
            .map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub splits: Vec<SplitMode>,
    pub train_fraction: f64,
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            splits: vec![SplitMode::FrameLevel],
            train_fraction: 0.4,
            jobs: 1,
        }
    }
}

/// Seed of a grid row: the base seed XOR the row's position among the
/// expanded (configuration, repeat) entries.
pub fn row_seed(base_seed: u64, index: usize, repeat: usize, grid_len: usize) -> u64 {
    base_seed ^ (repeat * grid_len + index) as u64
}

/// Trains every (split, configuration, repeat) entry. Row order follows
/// the grid, with split modes outermost, regardless of scheduling.
pub fn run_sweep(grid: &SweepGrid, vectors: &ClassVectors, opts: &SweepOptions) -> Result<SweepReport, SweepError> {
    if opts.splits.is_empty() {
        return Err(SweepError::NoSplits);
    }
    let mut work = Vec::new();
    for &split in &opts.splits {
        for repeat in 0..grid.repeats {
            for (index, row) in grid.rows.iter().enumerate() {
                work.push((split, repeat, index, *row));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        work.par_iter()
            .map(|&(split, repeat, index, row)| {
                let seed = row_seed(grid.base_seed, index, repeat, grid.len());
                let spec = ExperimentSpec {
                    network: row.network,
                    train: TrainConfig { seed, ..row.train },
                    split,
                    train_fraction: opts.train_fraction,
                };
                let started = Instant::now();
                let outcome = match run_experiment(vectors, &spec) {
                    Ok((_, _, r)) => RowOutcome::Completed {
                        train_accuracy: r.train_accuracy,
                        test_accuracy: r.test_accuracy,
                        epochs_run: r.epochs_run,
                        stop_reason: r.stop_reason,
                    },
                    Err(e) => {
                        log::warn!("sweep row {index} ({}) failed: {e}", split.label());
                        RowOutcome::Failed { error: e.to_string() }
                    }
                };
                let wall_time_s = started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
                log::info!("sweep row {index} repeat {repeat} ({}) done in {wall_time_s:.1}s", split.label());
                SweepRow {
                    index,
                    repeat,
                    split,
                    network: row.network,
                    seed,
                    outcome,
                    wall_time_s,
                }
            })
            .collect()
    });
    let all_failed = rows.iter().all(|r| matches!(r.outcome, RowOutcome::Failed { .. }));
    if all_failed {
        let first = match &rows[0].outcome {
            RowOutcome::Failed { error } => error.clone(),
            RowOutcome::Completed { .. } => unreachable!(),
        };
        return Err(SweepError::AllFailed(first));
    }
    Ok(SweepReport { rows })
}

/// Accuracy as a percentage with one decimal, e.g. 0.823 -> "82.3".
pub fn format_percent(accuracy: f64) -> String {
    let tenths = (accuracy * 1000.0).round() as i64;
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Inverse of [`format_percent`] at its resolution.
pub fn parse_percent(s: &str) -> Option<f64> {
    let (whole, frac) = s.split_once('.')?;
    if frac.len() != 1 {
        return None;
    }
    let whole: i64 = whole.parse().ok()?;
    let frac: i64 = frac.parse().ok()?;
    if whole < 0 {
        return None;
    }
    Some((whole * 10 + frac) as f64 / 1000.0)
}

pub const TSV_HEADER: [&str; 16] = [
    "index",
    "repeat",
    "split",
    "classes",
    "n",
    "m",
    "Fsize",
    "fsize",
    "SS",
    "st",
    "seed",
    "train_acc_pct",
    "test_acc_pct",
    "epochs_run",
    "stop_reason",
    "error",
];

fn sanitize(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn tsv_line(row: &SweepRow) -> String {
    let c = &row.network;
    let (train, test, epochs, stop, err) = match &row.outcome {
        RowOutcome::Completed {
            train_accuracy,
            test_accuracy,
            epochs_run,
            stop_reason,
        } => (
            format_percent(*train_accuracy),
            format_percent(*test_accuracy),
            epochs_run.to_string(),
            stop_reason.as_str().to_string(),
            String::new(),
        ),
        RowOutcome::Failed { error } => ("".into(), "".into(), "".into(), "".into(), sanitize(error)),
    };
    [
        row.index.to_string(),
        row.repeat.to_string(),
        row.split.label().to_string(),
        c.classes.to_string(),
        c.cnn_layers.to_string(),
        c.mlp_layers.to_string(),
        c.frame_size.to_string(),
        c.filter_size.to_string(),
        c.subsampling.to_string(),
        c.stride.to_string(),
        row.seed.to_string(),
        train,
        test,
        epochs,
        stop,
        err,
    ]
    .join("\t")
}

/// One TSV line for a single training run in the sweep schema.
pub fn train_report_tsv(spec: &ExperimentSpec, report: &TrainReport) -> String {
    let row = SweepRow {
        index: 0,
        repeat: 0,
        split: spec.split,
        network: spec.network,
        seed: spec.train.seed,
        outcome: RowOutcome::Completed {
            train_accuracy: report.train_accuracy,
            test_accuracy: report.test_accuracy,
            epochs_run: report.epochs_run,
            stop_reason: report.stop_reason,
        },
        wall_time_s: 0.0,
    };
    format!("{}\n{}\n", TSV_HEADER.join("\t"), tsv_line(&row))
}

pub fn render_tsv(report: &SweepReport) -> String {
    let mut out = TSV_HEADER.join("\t");
    out.push('\n');
    for row in &report.rows {
        out.push_str(&tsv_line(row));
        out.push('\n');
    }
    out
}

/// Parses [`render_tsv`] output. Wall times are not part of the format and
/// come back as zero.
pub fn parse_tsv(text: &str) -> Result<SweepReport, SweepError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TSV_HEADER.join("\t") => {}
        _ => {
            return Err(SweepError::Parse {
                line: 1,
                reason: "missing or unexpected header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let bad = |reason: &str| SweepError::Parse {
            line: line_no,
            reason: reason.into(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != TSV_HEADER.len() {
            return Err(bad("wrong column count"));
        }
        let int = |k: usize| cols[k].parse::<usize>().map_err(|_| bad(TSV_HEADER[k]));
        let split = match cols[2] {
            "frame" => SplitMode::FrameLevel,
            "subject" => SplitMode::SubjectLevel,
            _ => return Err(bad("split")),
        };
        let mut network = NetworkConfig::new(int(4)?, int(5)?, int(6)?, int(7)?, int(8)?, int(9)?);
        network.classes = int(3)?;
        let outcome = if cols[15].is_empty() {
            RowOutcome::Completed {
                train_accuracy: parse_percent(cols[11]).ok_or_else(|| bad("train_acc_pct"))?,
                test_accuracy: parse_percent(cols[12]).ok_or_else(|| bad("test_acc_pct"))?,
                epochs_run: int(13)?,
                stop_reason: StopReason::parse(cols[14]).ok_or_else(|| bad("stop_reason"))?,
            }
        } else {
            RowOutcome::Failed {
                error: cols[15].to_string(),
            }
        };
        rows.push(SweepRow {
            index: int(0)?,
            repeat: int(1)?,
            split,
            network,
            seed: cols[10].parse().map_err(|_| bad("seed"))?,
            outcome,
            wall_time_s: 0.0,
        });
    }
    Ok(SweepReport { rows })
}

pub const MARKDOWN_COLUMNS: [&str; 9] = [
    "No. of classes",
    "No. of CNN layers (n)",
    "No. of MLP layers (m)",
    "Frame size (F size)",
    "Filter size (f size)",
    "Subsampling rate (SS)",
    "stride",
    "Training accuracy",
    "Testing accuracy",
];

pub fn render_markdown(report: &SweepReport) -> String {
    let mut out = String::from("# Structure sweep\n");
    for split in [SplitMode::FrameLevel, SplitMode::SubjectLevel] {
        let rows: Vec<&SweepRow> = report.rows.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\n## {}-level split\n", split.label());
        if split == SplitMode::SubjectLevel {
            out.push_str(
                "No subject contributes frames to both partitions, so these results \
                 are not comparable with the frame-level table and are expected to be lower.\n\n",
            );
        }
        let _ = writeln!(out, "| {} |", MARKDOWN_COLUMNS.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(MARKDOWN_COLUMNS.len()));
        for r in &rows {
            let c = &r.network;
            let (train, test) = match &r.outcome {
                RowOutcome::Completed {
                    train_accuracy,
                    test_accuracy,
                    ..
                } => (
                    format!("{}%", format_percent(*train_accuracy)),
                    format!("{}%", format_percent(*test_accuracy)),
                ),
                RowOutcome::Failed { .. } => ("failed".into(), "failed".into()),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                c.classes, c.cnn_layers, c.mlp_layers, c.frame_size, c.filter_size, c.subsampling, c.stride, train, test
            );
        }
        if let Some(best) = report.best(split) {
            let _ = writeln!(
                out,
                "\nBest testing accuracy: {}% (grid row {}, repeat {}).",
                format_percent(best.test_accuracy().unwrap_or(0.0)),
                best.index + 1,
                best.repeat
            );
        }
        let failures: Vec<&&SweepRow> = rows
            .iter()
            .filter(|r| matches!(r.outcome, RowOutcome::Failed { .. }))
            .collect();
        if !failures.is_empty() {
            out.push_str("\nFailed rows:\n\n");
            for r in failures {
                if let RowOutcome::Failed { error } = &r.outcome {
                    let _ = writeln!(out, "- row {}, repeat {}: {}", r.index + 1, r.repeat, sanitize(error));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Markdown,
}

pub fn emit_report(report: &SweepReport, format: ReportFormat, path: &Path) -> Result<(), SweepError> {
    let text = match format {
        ReportFormat::Tsv => render_tsv(report),
        ReportFormat::Markdown => render_markdown(report),
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Where per-row wall times are written: next to the report, so the report
/// itself stays a pure function of its inputs.
pub fn timing_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("timing.tsv")
}

pub fn render_timing(report: &SweepReport) -> String {
    let mut out = String::from("index\trepeat\tsplit\twall_time_s\n");
    for r in &report.rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.3}", r.index, r.repeat, r.split.label(), r.wall_time_s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

impl From<&TrainReport> for ArmResult {
    fn from(r: &TrainReport) -> Self {
        Self {
            train_accuracy: r.train_accuracy,
            test_accuracy: r.test_accuracy,
            epochs_run: r.epochs_run,
            stop_reason: r.stop_reason,
        }
    }
}

/// Same experiment on raw and band-passed vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub spec: ExperimentSpec,
    pub filter: Option<crate::signal::Cheby2Bandpass>,
    pub raw: ArmResult,
    pub filtered: ArmResult,
    /// filtered minus raw.
    pub delta_train_accuracy: f64,
    pub delta_test_accuracy: f64,
}

pub fn run_ablation(
    raw: &ClassVectors,
    filtered: &ClassVectors,
    spec: &ExperimentSpec,
) -> Result<AblationReport, ExperimentError> {
    let (_, _, r) = run_experiment(raw, spec)?;
    let (_, _, f) = run_experiment(filtered, spec)?;
    Ok(AblationReport {
        version: trainer::REPORT_VERSION,
        spec: *spec,
        filter: filtered.filter,
        raw: ArmResult::from(&r),
        filtered: ArmResult::from(&f),
        delta_train_accuracy: f.train_accuracy - r.train_accuracy,
        delta_test_accuracy: f.test_accuracy - r.test_accuracy,
    })
}
