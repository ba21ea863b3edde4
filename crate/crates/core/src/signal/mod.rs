//! Signal-level primitives shared by the dataset and training layers.

mod filter;
mod synth;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{chebyshev2_bandpass, Biquad, Cheby2Bandpass, SosFilter};
pub use synth::{synth_ppg, SynthParams};

/// Sample rate of the Empatica E4 BVP channel.
pub const SAMPLE_RATE_HZ: u32 = 64;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("signal is empty")]
    Empty,
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("signal shorter than frame ({len} samples < frame of {frame_len})")]
    ShorterThanFrame { len: usize, frame_len: usize },
    #[error("frame length and stride must be at least 1 (frame_len={frame_len}, stride={stride})")]
    ZeroFraming { frame_len: usize, stride: usize },
    #[error("invalid band: need 0 < {low_hz} < {high_hz} < {nyquist_hz} Hz")]
    InvalidBand {
        low_hz: f64,
        high_hz: f64,
        nyquist_hz: f64,
    },
    #[error("filter order must be even and >= 2, got {0}")]
    InvalidOrder(usize),
    #[error("stopband attenuation must be positive, got {0} dB")]
    InvalidAttenuation(f64),
    #[error("invalid synthesis parameters: {0}")]
    InvalidSynth(String),
    #[error("line {line}: cannot parse {content:?} as a sample")]
    Parse { line: usize, content: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Protocol task of a recording. Only the rest and speech tasks are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    T1Rest,
    T2Speech,
}

impl Task {
    pub fn class(self) -> Class {
        match self {
            Task::T1Rest => Class::NonStress,
            Task::T2Speech => Class::Stress,
        }
    }

    /// File-name tag, `T1` or `T2`.
    pub fn tag(self) -> &'static str {
        match self {
            Task::T1Rest => "T1",
            Task::T2Speech => "T2",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Class label: rest recordings are class 0, speech recordings class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    NonStress = 0,
    Stress = 1,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::NonStress, Class::Stress];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Class> {
        match index {
            0 => Some(Class::NonStress),
            1 => Some(Class::Stress),
            _ => None,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Class::NonStress => Task::T1Rest,
            Class::Stress => Task::T2Speech,
        }
    }
}

/// One subject-task recording.
#[derive(Debug, Clone, PartialEq)]
pub struct PpgSignal {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    pub subject_id: u32,
    pub task: Task,
}

impl PpgSignal {
    pub fn new(
        samples: Vec<f64>,
        sample_rate_hz: u32,
        subject_id: u32,
        task: Task,
    ) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::Empty);
        }
        if sample_rate_hz == 0 {
            return Err(SignalError::ZeroSampleRate);
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            subject_id,
            task,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same identity, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self, SignalError> {
        Self::new(samples, self.sample_rate_hz, self.subject_id, self.task)
    }
}

/// Maps `signal` affinely onto `[-1, +1]`. A constant signal maps to zeros.
pub fn normalize_minmax(signal: &[f64]) -> Result<Vec<f64>, SignalError> {
    if signal.is_empty() {
        return Err(SignalError::Empty);
    }
    let (min, max) = signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    Ok(normalize_with_range(signal, min, max))
}

/// Applies the min-max map for an externally chosen range. Values are
/// clamped so rounding can never leave `[-1, +1]`.
pub fn normalize_with_range(signal: &[f64], min: f64, max: f64) -> Vec<f64> {
    let range = max - min;
    if range <= 0.0 || !range.is_finite() {
        return vec![0.0; signal.len()];
    }
    signal
        .iter()
        .map(|&x| {
            if x == min {
                -1.0
            } else if x == max {
                1.0
            } else {
                (2.0 * (x - min) / range - 1.0).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// Number of full frames of `frame_len` at `stride` in `len` samples.
pub fn frame_count(len: usize, frame_len: usize, stride: usize) -> Result<usize, SignalError> {
    if frame_len == 0 || stride == 0 {
        return Err(SignalError::ZeroFraming { frame_len, stride });
    }
    if frame_len > len {
        return Err(SignalError::ShorterThanFrame { len, frame_len });
    }
    Ok((len - frame_len) / stride + 1)
}

/// Start offsets of every full frame; trailing samples are dropped.
pub fn frame_offsets(
    len: usize,
    frame_len: usize,
    stride: usize,
) -> Result<impl Iterator<Item = usize>, SignalError> {
    let count = frame_count(len, frame_len, stride)?;
    Ok((0..count).map(move |k| k * stride))
}

/// Where a frame was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameOrigin {
    pub subject_id: u32,
    pub task: Task,
    pub start: usize,
}

/// A window into a shared recording. The values are never copied; frames
/// cut from the same row share its buffer.
#[derive(Debug, Clone)]
pub struct Frame {
    source: Arc<[f64]>,
    len: usize,
    pub label: Class,
    pub origin: FrameOrigin,
}

impl Frame {
    pub fn new(source: Arc<[f64]>, origin: FrameOrigin, len: usize, label: Class) -> Self {
        assert!(
            origin.start + len <= source.len(),
            "frame [{}, {}) exceeds source of {} samples",
            origin.start,
            origin.start + len,
            source.len()
        );
        Self {
            source,
            len,
            label,
            origin,
        }
    }

    /// Standalone frame that owns its samples.
    pub fn from_values(values: Vec<f64>, label: Class, origin: FrameOrigin) -> Self {
        let len = values.len();
        let origin = FrameOrigin { start: 0, ..origin };
        Self::new(values.into(), origin, len, label)
    }

    pub fn values(&self) -> &[f64] {
        &self.source[self.origin.start..self.origin.start + self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl PartialEq for Frame {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.origin == other.origin && self.values() == other.values()
    }
}

/// An ordered collection of equally sized labelled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub frames: Vec<Frame>,
    pub frame_len: usize,
    pub stride: usize,
}

impl FrameSet {
    pub fn empty(frame_len: usize, stride: usize) -> Self {
        Self {
            frames: Vec::new(),
            frame_len,
            stride,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.frames.iter()
    }

    /// New set with the same geometry holding `frames`.
    pub fn with_frames(&self, frames: Vec<Frame>) -> Self {
        Self {
            frames,
            frame_len: self.frame_len,
            stride: self.stride,
        }
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for f in &self.frames {
            counts[f.label.index()] += 1;
        }
        counts
    }
}

/// Cuts a shared buffer into frames labelled `label`.
pub fn frame_buffer(
    source: &Arc<[f64]>,
    subject_id: u32,
    task: Task,
    label: Class,
    frame_len: usize,
    stride: usize,
) -> Result<Vec<Frame>, SignalError> {
    Ok(frame_offsets(source.len(), frame_len, stride)?
        .map(|start| {
            Frame::new(
                Arc::clone(source),
                FrameOrigin {
                    subject_id,
                    task,
                    start,
                },
                frame_len,
                label,
            )
        })
        .collect())
}

/// Frames a recording; every frame carries the class of the recording's task.
pub fn frame_signal(
    signal: &PpgSignal,
    frame_len: usize,
    stride: usize,
) -> Result<FrameSet, SignalError> {
    let source: Arc<[f64]> = signal.samples().into();
    let frames = frame_buffer(
        &source,
        signal.subject_id,
        signal.task,
        signal.task.class(),
        frame_len,
        stride,
    )?;
    Ok(FrameSet {
        frames,
        frame_len,
        stride,
    })
}

/// Reads a single-column CSV of decimal samples. Blank lines are skipped;
/// line numbers in errors are 1-based physical lines.
pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<f64>, SignalError> {
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: f64 = trimmed.parse().map_err(|_| SignalError::Parse {
            line: idx + 1,
            content: trimmed.to_string(),
        })?;
        if !value.is_finite() {
            return Err(SignalError::Parse {
                line: idx + 1,
                content: trimmed.to_string(),
            });
        }
        samples.push(value);
    }
    if samples.is_empty() {
        return Err(SignalError::Empty);
    }
    Ok(samples)
}

/// Writes one sample per line using the shortest round-tripping decimal form.
pub fn write_samples<W: Write>(mut writer: W, samples: &[f64]) -> std::io::Result<()> {
    for s in samples {
        writeln!(writer, "{s}")?;
    }
    writer.flush()
}

pub fn read_samples_file(path: &Path) -> Result<Vec<f64>, SignalError> {
    let file = std::fs::File::open(path)?;
    read_samples(std::io::BufReader::new(file))
}

pub fn write_samples_file(path: &Path, samples: &[f64]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_samples(std::io::BufWriter::new(file), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        assert_eq!(normalize_minmax(&[2.0, 4.0, 6.0]).unwrap(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        assert_eq!(normalize_minmax(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn normalize_empty_errors() {
        assert!(matches!(normalize_minmax(&[]), Err(SignalError::Empty)));
    }

    #[test]
    fn framing_counts() {
        assert_eq!(frame_count(11520, 1024, 24).unwrap(), 438);
        assert_eq!(frame_count(64, 64, 24).unwrap(), 1);
        assert_eq!(frame_count(11520, 2048, 2).unwrap(), 4737);
    }

    #[test]
    fn framing_rejects_short_signal() {
        let err = frame_count(10, 11, 1).unwrap_err();
        assert!(err.to_string().contains("signal shorter than frame"));
    }

    #[test]
    fn frames_are_verbatim_slices() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let sig = PpgSignal::new(samples.clone(), 64, 3, Task::T2Speech).unwrap();
        let set = frame_signal(&sig, 10, 7).unwrap();
        assert_eq!(set.len(), (100 - 10) / 7 + 1);
        for f in set.iter() {
            let s = f.origin.start;
            assert_eq!(f.values(), &samples[s..s + 10]);
            assert_eq!(f.label, Class::Stress);
            assert_eq!(f.origin.subject_id, 3);
        }
        let last = set.frames.last().unwrap();
        assert!(last.origin.start + 10 <= 100);
    }

    #[test]
    fn csv_parse_error_names_line() {
        let text = "1.0\n2.0\nabc\n4.0\n";
        match read_samples(text.as_bytes()) {
            Err(SignalError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(read_samples("".as_bytes()), Err(SignalError::Empty)));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let samples = vec![0.1, -3.25e-7, 1234.5678901234567, f64::MIN_POSITIVE];
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), samples);
    }

    fn non_constant_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0e3..1.0e3f64, 2..200)
            .prop_filter("non-constant", |v| v.iter().any(|&x| x != v[0]))
    }

    proptest! {
        #[test]
        fn normalize_hits_both_bounds(v in non_constant_vec()) {
            let out = normalize_minmax(&v).unwrap();
            let min = out.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(min, -1.0);
            prop_assert_eq!(max, 1.0);
            prop_assert_eq!(out.len(), v.len());
        }

        #[test]
        fn normalize_is_idempotent(v in non_constant_vec()) {
            let once = normalize_minmax(&v).unwrap();
            let twice = normalize_minmax(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalize_is_affine_invariant(v in non_constant_vec(), a in 0.01..100.0f64, b in -100.0..100.0f64) {
            let base = normalize_minmax(&v).unwrap();
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            // Rescaling can collapse nearly equal samples; skip those draws.
            prop_assume!(moved.iter().any(|&x| x != moved[0]));
            let out = normalize_minmax(&moved).unwrap();
            for (x, y) in base.iter().zip(&out) {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }

        #[test]
        fn frame_count_matches_enumeration(len in 1usize..3000, frame_len in 1usize..600, stride in 1usize..50) {
            prop_assume!(frame_len <= len);
            let brute = (0..len).filter(|s| s % stride == 0 && s + frame_len <= len).count();
            prop_assert_eq!(frame_count(len, frame_len, stride).unwrap(), brute);
        }
    }
}
