//! Dataset assembly: per-class subject matrices, labelled frames, splits.
//!
//! On disk a dataset is a directory of subject folders `s<i>/` each holding
//! `bvp_s<i>_T1.csv` (rest) and `bvp_s<i>_T2.csv` (speech). Every recording
//! becomes one row of exactly [`ROW_LEN`] samples in its class matrix.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError};
use crate::seed;
use crate::signal::{
    self, Cheby2Bandpass, Class, FrameSet, PpgSignal, SignalError, SynthParams, Task, SAMPLE_RATE_HZ,
};

/// Three minutes at 64 Hz.
pub const ROW_LEN: usize = 11520;
pub const MAX_SUBJECTS: usize = 56;

pub const CACHE_MAGIC: &[u8; 8] = b"SNETDATA";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Signal {
        path: PathBuf,
        #[source]
        source: SignalError,
    },
    #[error(transparent)]
    SignalOp(#[from] SignalError),
    #[error("dataset root {0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("recordings shorter than {ROW_LEN} samples for subjects {0:?}")]
    ShortRecording(Vec<u32>),
    #[error("recordings longer than {ROW_LEN} samples for subjects {0:?} (truncation disabled)")]
    LongRecording(Vec<u32>),
    #[error("subject s{subject} is missing {path}")]
    Incomplete { subject: u32, path: PathBuf },
    #[error("no usable subjects")]
    NoSubjects,
    #[error("invalid class matrix: {0}")]
    InvalidMatrix(String),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("subject-level split needs at least 2 subjects, found {0}")]
    TooFewSubjects(usize),
    #[error("frame set is empty")]
    EmptyFrames,
    #[error("dataset cache: {0}")]
    Cache(#[from] ArchiveError),
    #[error("dataset cache header: {0}")]
    CacheHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads one subject-task BVP export.
pub fn load_bvp_csv(path: &Path, subject_id: u32, task: Task) -> Result<PpgSignal, DataError> {
    let wrap = |source| DataError::Signal {
        path: path.to_path_buf(),
        source,
    };
    let samples = signal::read_samples_file(path).map_err(wrap)?;
    PpgSignal::new(samples, SAMPLE_RATE_HZ, subject_id, task).map_err(wrap)
}

pub fn bvp_path(root: &Path, subject_id: u32, task: Task) -> PathBuf {
    root.join(format!("s{subject_id}"))
        .join(format!("bvp_s{subject_id}_{}.csv", task.tag()))
}

/// One subject's recording inside a class matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRow {
    pub subject_id: u32,
    pub samples: Arc<[f64]>,
}

/// Rows of one class, ordered by subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    class: Class,
    rows: Vec<SubjectRow>,
}

impl ClassMatrix {
    pub fn new(class: Class, rows: Vec<SubjectRow>) -> Result<Self, DataError> {
        if rows.len() > MAX_SUBJECTS {
            return Err(DataError::InvalidMatrix(format!(
                "{} rows exceeds {MAX_SUBJECTS} subjects",
                rows.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.samples.len() != ROW_LEN) {
            return Err(DataError::InvalidMatrix(format!(
                "row for s{} has {} samples, expected {ROW_LEN}",
                r.subject_id,
                r.samples.len()
            )));
        }
        if rows.windows(2).any(|w| w[0].subject_id >= w[1].subject_id) {
            return Err(DataError::InvalidMatrix("subject ids must be strictly increasing".into()));
        }
        Ok(Self { class, rows })
    }

    pub fn class(&self) -> Class {
        self.class
    }

    pub fn rows(&self) -> &[SubjectRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.subject_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    /// Each subject-task row normalized on its own range.
    #[default]
    PerVector,
    /// One range over every row of both classes.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LongRecording {
    #[default]
    Truncate,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingTask {
    #[default]
    SkipIncomplete,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LengthPolicy {
    pub long: LongRecording,
    pub missing: MissingTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BuildOptions {
    pub policy: LengthPolicy,
    pub norm: NormScope,
    /// Optional band-pass applied before normalization.
    pub filter: Option<Cheby2Bandpass>,
}

/// Both class matrices plus how they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVectors {
    pub non_stress: ClassMatrix,
    pub stress: ClassMatrix,
    pub norm: NormScope,
    pub filter: Option<Cheby2Bandpass>,
    pub skipped: Vec<u32>,
    pub warnings: Vec<String>,
}

impl ClassVectors {
    pub fn subject_count(&self) -> usize {
        self.non_stress.len()
    }
}

fn discover_subjects(root: &Path) -> Result<Vec<u32>, DataError> {
    if !root.is_dir() {
        return Err(DataError::NotADirectory(root.to_path_buf()));
    }
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name();
        if let Some(id) = name
            .to_str()
            .and_then(|n| n.strip_prefix('s'))
            .and_then(|n| n.parse::<u32>().ok())
        {
            ids.insert(id);
        }
    }
    Ok(ids.into_iter().collect())
}

/// Assembles both class matrices from a dataset directory.
pub fn build_class_vectors(root: &Path, opts: &BuildOptions) -> Result<ClassVectors, DataError> {
    let subjects = discover_subjects(root)?;
    let loaded: Vec<_> = subjects
        .par_iter()
        .map(|&id| {
            let load = |task| {
                let path = bvp_path(root, id, task);
                if path.is_file() {
                    load_bvp_csv(&path, id, task).map(Some)
                } else {
                    Ok(None)
                }
            };
            (id, load(Task::T1Rest), load(Task::T2Speech))
        })
        .collect();

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for (id, rest, speech) in loaded {
        match (rest?, speech?) {
            (Some(r), Some(s)) => pairs.push((r, s)),
            (r, _) => {
                let task = if r.is_none() { Task::T1Rest } else { Task::T2Speech };
                let path = bvp_path(root, id, task);
                if opts.policy.missing == MissingTask::Fail {
                    return Err(DataError::Incomplete { subject: id, path });
                }
                let msg = format!("skipping subject s{id}: missing {}", path.display());
                log::warn!("{msg}");
                warnings.push(msg);
                skipped.push(id);
            }
        }
    }
    let mut vectors = class_vectors_from_signals(pairs, opts)?;
    vectors.skipped = skipped;
    warnings.append(&mut vectors.warnings);
    vectors.warnings = warnings;
    Ok(vectors)
}

/// Builds class matrices from in-memory `(rest, speech)` recording pairs.
pub fn class_vectors_from_signals(
    mut pairs: Vec<(PpgSignal, PpgSignal)>,
    opts: &BuildOptions,
) -> Result<ClassVectors, DataError> {
    pairs.sort_by_key(|(r, _)| r.subject_id);
    let mut short = BTreeSet::new();
    let mut long = BTreeSet::new();
    let mut warnings = Vec::new();
    for sig in pairs.iter().flat_map(|(r, s)| [r, s]) {
        if sig.len() < ROW_LEN {
            short.insert(sig.subject_id);
        } else if sig.len() > ROW_LEN {
            long.insert(sig.subject_id);
        }
    }
    if !short.is_empty() {
        return Err(DataError::ShortRecording(short.into_iter().collect()));
    }
    if !long.is_empty() {
        if opts.policy.long == LongRecording::Reject {
            return Err(DataError::LongRecording(long.into_iter().collect()));
        }
        let msg = format!("truncated recordings to {ROW_LEN} samples for subjects {long:?}");
        log::info!("{msg}");
        warnings.push(msg);
    }
    if pairs.is_empty() {
        return Err(DataError::NoSubjects);
    }

    let filter = opts
        .filter
        .map(|f| f.design(SAMPLE_RATE_HZ as f64))
        .transpose()?;
    let prepare = |sig: &PpgSignal| -> Vec<f64> {
        let head = &sig.samples()[..ROW_LEN];
        match &filter {
            Some(f) => f.apply(head),
            None => head.to_vec(),
        }
    };
    let mut raw: Vec<(u32, Vec<f64>, Vec<f64>)> = pairs
        .par_iter()
        .map(|(r, s)| (r.subject_id, prepare(r), prepare(s)))
        .collect();

    match opts.norm {
        NormScope::PerVector => {
            for (_, r, s) in raw.iter_mut() {
                *r = signal::normalize_minmax(r)?;
                *s = signal::normalize_minmax(s)?;
            }
        }
        NormScope::Global => {
            let (min, max) = raw
                .iter()
                .flat_map(|(_, r, s)| r.iter().chain(s))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            for (_, r, s) in raw.iter_mut() {
                *r = signal::normalize_with_range(r, min, max);
                *s = signal::normalize_with_range(s, min, max);
            }
        }
    }

    let (mut rest_rows, mut speech_rows) = (Vec::new(), Vec::new());
    for (id, r, s) in raw {
        rest_rows.push(SubjectRow {
            subject_id: id,
            samples: r.into(),
        });
        speech_rows.push(SubjectRow {
            subject_id: id,
            samples: s.into(),
        });
    }
    Ok(ClassVectors {
        non_stress: ClassMatrix::new(Class::NonStress, rest_rows)?,
        stress: ClassMatrix::new(Class::Stress, speech_rows)?,
        norm: opts.norm,
        filter: opts.filter,
        skipped: Vec::new(),
        warnings,
    })
}

/// The synthetic recording for one subject and class.
pub fn synthetic_recording(subject_id: u32, class: Class, base_seed: u64) -> Result<PpgSignal, SignalError> {
    let mut sig = signal::synth_ppg(&SynthParams::for_subject(class, subject_id, base_seed))?;
    sig.subject_id = subject_id;
    Ok(sig)
}

/// Writes a synthetic tree for subjects `1..=subjects`.
pub fn write_synthetic_tree(root: &Path, subjects: u32, base_seed: u64) -> Result<(), DataError> {
    if subjects == 0 || subjects as usize > MAX_SUBJECTS {
        return Err(DataError::InvalidMatrix(format!(
            "subject count must lie in 1..={MAX_SUBJECTS}, got {subjects}"
        )));
    }
    (1..=subjects).into_par_iter().try_for_each(|id| {
        std::fs::create_dir_all(root.join(format!("s{id}")))?;
        for class in Class::ALL {
            let sig = synthetic_recording(id, class, base_seed)?;
            signal::write_samples_file(&bvp_path(root, id, class.task()), sig.samples())?;
        }
        Ok::<_, DataError>(())
    })
}

/// Synthetic class matrices without touching the filesystem.
pub fn synthetic_class_vectors(
    subjects: u32,
    base_seed: u64,
    opts: &BuildOptions,
) -> Result<ClassVectors, DataError> {
    let pairs = (1..=subjects)
        .into_par_iter()
        .map(|id| {
            Ok((
                synthetic_recording(id, Class::NonStress, base_seed)?,
                synthetic_recording(id, Class::Stress, base_seed)?,
            ))
        })
        .collect::<Result<Vec<_>, SignalError>>()?;
    class_vectors_from_signals(pairs, opts)
}

/// Frames every row independently; frames inherit the row's class.
pub fn make_labeled_frames(
    non_stress: &ClassMatrix,
    stress: &ClassMatrix,
    frame_len: usize,
    stride: usize,
) -> Result<FrameSet, DataError> {
    let mut frames = Vec::new();
    for matrix in [non_stress, stress] {
        let class = matrix.class();
        for row in matrix.rows() {
            frames.extend(signal::frame_buffer(
                &row.samples,
                row.subject_id,
                class.task(),
                class,
                frame_len,
                stride,
            )?);
        }
    }
    Ok(FrameSet {
        frames,
        frame_len,
        stride,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Frames partitioned individually; a subject's frames land on both sides.
    #[default]
    FrameLevel,
    /// Whole subjects partitioned; no subject appears on both sides.
    SubjectLevel,
}

impl SplitMode {
    pub fn label(self) -> &'static str {
        match self {
            SplitMode::FrameLevel => "frame",
            SplitMode::SubjectLevel => "subject",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: FrameSet,
    pub test: FrameSet,
    pub mode: SplitMode,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Deterministic random partition. Both sides keep the input order.
pub fn split_train_test(
    frames: &FrameSet,
    train_fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetSplit, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    if frames.is_empty() {
        return Err(DataError::EmptyFrames);
    }
    let mut rng = seed::rng(seed);
    let in_train: Vec<bool> = match mode {
        SplitMode::FrameLevel => {
            let n_train = (train_fraction * frames.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..frames.len()).collect();
            order.shuffle(&mut rng);
            let mut mask = vec![false; frames.len()];
            for &i in &order[..n_train] {
                mask[i] = true;
            }
            mask
        }
        SplitMode::SubjectLevel => {
            let subjects: BTreeSet<u32> = frames.iter().map(|f| f.origin.subject_id).collect();
            if subjects.len() < 2 {
                return Err(DataError::TooFewSubjects(subjects.len()));
            }
            let mut ids: Vec<u32> = subjects.into_iter().collect();
            ids.shuffle(&mut rng);
            let n_train = ((train_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
            let train_ids: BTreeSet<u32> = ids[..n_train].iter().copied().collect();
            frames
                .iter()
                .map(|f| train_ids.contains(&f.origin.subject_id))
                .collect()
        }
    };
    let (train, test): (Vec<_>, Vec<_>) = frames
        .iter()
        .zip(&in_train)
        .partition(|(_, &t)| t);
    Ok(DatasetSplit {
        train: frames.with_frames(train.into_iter().map(|(f, _)| f.clone()).collect()),
        test: frames.with_frames(test.into_iter().map(|(f, _)| f.clone()).collect()),
        mode,
        train_fraction,
        seed,
    })
}

/// A deterministic permutation of `frames`.
pub fn shuffle_epoch(frames: &FrameSet, epoch_seed: u64) -> FrameSet {
    let mut out = frames.clone();
    out.frames.shuffle(&mut seed::rng(epoch_seed));
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    row_len: usize,
    subject_count: usize,
    subject_ids: Vec<u32>,
    normalization: NormScope,
    filter: Option<Cheby2Bandpass>,
    skipped: Vec<u32>,
}

/// Writes both matrices (rest rows first) to a checksummed cache file.
pub fn save_cache(vectors: &ClassVectors, path: &Path) -> Result<(), DataError> {
    let header = CacheHeader {
        format: "stressnet-dataset".into(),
        version: CACHE_VERSION,
        row_len: ROW_LEN,
        subject_count: vectors.subject_count(),
        subject_ids: vectors.non_stress.subject_ids(),
        normalization: vectors.norm,
        filter: vectors.filter,
        skipped: vectors.skipped.clone(),
    };
    let json = serde_json::to_string(&header).expect("header serialises");
    let mut values = Vec::with_capacity(2 * header.subject_count * ROW_LEN);
    for m in [&vectors.non_stress, &vectors.stress] {
        for row in m.rows() {
            values.extend_from_slice(&row.samples);
        }
    }
    archive::write_file(path, CACHE_MAGIC, &json, &values)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<ClassVectors, DataError> {
    let (json, values) = archive::read_file(path, CACHE_MAGIC, "dataset cache")?;
    let header: CacheHeader =
        serde_json::from_str(&json).map_err(|e| DataError::CacheHeader(e.to_string()))?;
    if header.version != CACHE_VERSION {
        return Err(DataError::CacheHeader(format!(
            "unsupported version {} (expected {CACHE_VERSION})",
            header.version
        )));
    }
    let n = header.subject_count;
    if header.row_len != ROW_LEN || header.subject_ids.len() != n || values.len() != 2 * n * ROW_LEN {
        return Err(DataError::CacheHeader("header does not match payload size".into()));
    }
    let mut chunks = values.chunks_exact(ROW_LEN);
    let mut rows = |class| {
        let rows = header
            .subject_ids
            .iter()
            .map(|&id| SubjectRow {
                subject_id: id,
                samples: chunks.next().expect("size checked").into(),
            })
            .collect();
        ClassMatrix::new(class, rows)
    };
    let non_stress = rows(Class::NonStress)?;
    let stress = rows(Class::Stress)?;
    Ok(ClassVectors {
        non_stress,
        stress,
        norm: header.normalization,
        filter: header.filter,
        skipped: header.skipped,
        warnings: Vec::new(),
    })
}
