//! Online SGD training with per-epoch shuffling and three stopping rules:
//! an epoch cap, a floor on the mean squared weight change per epoch
//! ("delta-LMS"), and patience-based early stopping on a validation slice
//! carved from the training partition.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetSplit};
use crate::network::{self, ModelState, NetworkConfig, NetworkError};
use crate::nn;
use crate::seed;
use crate::signal::FrameSet;

pub const REPORT_VERSION: u32 = 1;

const VAL_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 1_000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training partition is empty")]
    EmptyTrain,
    #[error("cannot evaluate an empty frame set")]
    EmptyEval,
    #[error("model expects {expected}-sample frames, data has {found}")]
    FrameMismatch { expected: usize, found: usize },
    #[error("training diverged in epoch {epoch} (non-finite loss or weights)")]
    Diverged { epoch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub delta_lms_threshold: f64,
    pub learning_rate: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Share of the training partition held out for early-stop monitoring.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            delta_lms_threshold: 0.001,
            learning_rate: 0.01,
            patience: 20,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.delta_lms_threshold.is_nan() || self.delta_lms_threshold <= 0.0 {
            return bad("delta_lms_threshold must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    DeltaLms,
    BestFit,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::DeltaLms => "delta_lms",
            StopReason::BestFit => "best_fit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max_epochs" => Some(StopReason::MaxEpochs),
            "delta_lms" => Some(StopReason::DeltaLms),
            "best_fit" => Some(StopReason::BestFit),
            _ => None,
        }
    }
}

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion(pub [[usize; 2]; 2]);

impl Confusion {
    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        self.0[0][0] + self.0[1][1]
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Confusion,
}

/// Accuracy and confusion matrix of `model` on `frames`.
pub fn evaluate(model: &ModelState, frames: &FrameSet) -> Result<Evaluation, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    check_frames(model, frames)?;
    let confusion = frames
        .frames
        .par_iter()
        .map(|f| {
            let predicted = model.predict(f.values())?;
            let mut c = Confusion::default();
            c.0[f.label.index()][predicted] += 1;
            Ok(c)
        })
        .try_reduce(Confusion::default, |mut a, b| {
            for (ra, rb) in a.0.iter_mut().zip(b.0) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
            Ok(a)
        })
        .map_err(|e: NetworkError| TrainError::Network(e))?;
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
    })
}

fn check_frames(model: &ModelState, frames: &FrameSet) -> Result<(), TrainError> {
    if frames.frame_len != model.config.frame_size {
        return Err(TrainError::FrameMismatch {
            expected: model.config.frame_size,
            found: frames.frame_len,
        });
    }
    Ok(())
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    /// Accuracy on the whole training partition, validation slice included.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    /// Epoch whose weights the model ended with.
    pub final_weights_epoch: usize,
    pub best_val_epoch: Option<usize>,
    /// Validation accuracy of the returned weights.
    pub final_val_accuracy: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub delta_lms_curve: Vec<f64>,
    pub val_accuracy_curve: Vec<f64>,
    pub confusion: Confusion,
    pub train_confusion: Confusion,
    pub fit_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Splits the training partition into fit and validation subsets.
pub fn carve_validation(train: &FrameSet, cfg: &TrainConfig) -> (FrameSet, FrameSet) {
    let n = train.len();
    let n_val = ((cfg.val_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive_seed(cfg.seed, VAL_STREAM)));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for (f, v) in train.frames.iter().zip(is_val) {
        if v { val.push(f.clone()) } else { fit.push(f.clone()) }
    }
    (train.with_frames(fit), train.with_frames(val))
}

fn mean_squared_change(before: &[f64], after: &[f64]) -> f64 {
    let sum: f64 = before.iter().zip(after).map(|(a, b)| (b - a) * (b - a)).sum();
    sum / before.len() as f64
}

/// Trains `model` on `split.train` and evaluates on both partitions.
pub fn train(
    mut model: ModelState,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport), TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if split.test.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    check_frames(&model, &split.train)?;
    check_frames(&model, &split.test)?;

    let (fit, val) = carve_validation(&split.train, cfg);
    let mut loss_curve = Vec::new();
    let mut delta_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0;
    let mut final_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        final_epoch = epoch;
        let order = dataset::shuffle_epoch(&fit, seed::derive_seed(cfg.seed, EPOCH_STREAM + epoch as u64));
        let start = model.params();
        let mut loss_sum = 0.0;
        for frame in order.iter() {
            let (loss, grads) = model.loss_and_grads(frame.values(), frame.label.index())?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            model.sgd_step(&grads, cfg.learning_rate);
            loss_sum += loss;
        }
        let end = model.params();
        if end.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Diverged { epoch });
        }
        let mean_loss = loss_sum / order.len() as f64;
        let delta_lms = mean_squared_change(&start, &end);
        loss_curve.push(mean_loss);
        delta_curve.push(delta_lms);
        log::debug!("epoch {epoch}: loss {mean_loss:.6} delta-lms {delta_lms:.3e}");

        if !val.is_empty() {
            let acc = evaluate(&model, &val)?.accuracy;
            val_curve.push(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, end));
            }
        }

        if delta_lms <= cfg.delta_lms_threshold {
            stop = StopReason::DeltaLms;
            break;
        }
        if let Some((_, best_epoch, params)) = &best {
            if epoch - best_epoch >= cfg.patience {
                model.set_params(params)?;
                final_epoch = *best_epoch;
                stop = StopReason::BestFit;
                break;
            }
        }
    }

    let final_val_accuracy = if val.is_empty() {
        None
    } else {
        Some(evaluate(&model, &val)?.accuracy)
    };
    let train_eval = evaluate(&model, &split.train)?;
    let test_eval = evaluate(&model, &split.test)?;
    let report = TrainReport {
        version: REPORT_VERSION,
        train_accuracy: train_eval.accuracy,
        test_accuracy: test_eval.accuracy,
        epochs_run,
        stop_reason: stop,
        final_weights_epoch: final_epoch,
        best_val_epoch: best.as_ref().map(|b| b.1),
        final_val_accuracy,
        loss_curve,
        delta_lms_curve: delta_curve,
        val_accuracy_curve: val_curve,
        confusion: test_eval.confusion,
        train_confusion: train_eval.confusion,
        fit_frames: fit.len(),
        val_frames: val.len(),
        test_frames: split.test.len(),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const GRADCHECK_EPS: f64 = 1e-5;
/// Central differences at `GRADCHECK_EPS` carry roughly 1e-10 of absolute
/// error, so gradient components below this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares backprop gradients on one random frame against central
/// differences. Biases are randomised too so their paths are exercised.
pub fn gradient_check(config: &NetworkConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport, TrainError> {
    let mut model = network::build_network(*config, seed)?;
    let mut rng = seed::rng(seed::derive_seed(seed, 7));
    for l in &mut model.conv_layers {
        l.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    for l in &mut model.dense_layers {
        l.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let frame: Vec<f64> = (0..config.frame_size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let label = rng.random_range(0..config.classes);
    gradient_check_model(&model, &frame, label, tolerance)
}

/// Gradient check for an explicit model, frame and label.
pub fn gradient_check_model(
    model: &ModelState,
    frame: &[f64],
    label: usize,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    let (_, grads) = model.loss_and_grads(frame, label)?;
    let analytic = grads.flatten();
    let mut scratch = model.clone();
    let numeric = nn::finite_diff_gradient(
        |p| {
            scratch.set_params(p).expect("same shape");
            scratch.loss(frame, label).expect("validated frame")
        },
        &model.params(),
        GRADCHECK_EPS,
    );
    let mut layers = Vec::new();
    let mut at = 0;
    for (name, count) in model.layer_blocks() {
        let max_rel_error = analytic[at..at + count]
            .iter()
            .zip(&numeric[at..at + count])
            .map(|(a, n)| nn::relative_error_floored(*a, *n, GRADCHECK_FLOOR))
            .fold(0.0, f64::max);
        layers.push(LayerCheck {
            name,
            params: count,
            max_rel_error,
        });
        at += count;
    }
    let max_rel_error = layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        layers,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_labeled_frames, split_train_test, synthetic_class_vectors, BuildOptions, SplitMode};

    fn small_split(seed: u64) -> DatasetSplit {
        let v = synthetic_class_vectors(2, seed, &BuildOptions::default()).unwrap();
        let frames = make_labeled_frames(&v.non_stress, &v.stress, 64, 48).unwrap();
        split_train_test(&frames, 0.4, seed, SplitMode::FrameLevel).unwrap()
    }

    fn small_model(seed: u64) -> ModelState {
        network::build_network(NetworkConfig::new(2, 2, 64, 8, 2, 48), seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_stops_on_delta_lms() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (_, r) = train(small_model(1), &small_split(1), &cfg).unwrap();
        assert_eq!(r.epochs_run, 1);
        assert_eq!(r.stop_reason, StopReason::DeltaLms);
        assert_eq!(r.delta_lms_curve, vec![0.0]);
    }

    #[test]
    fn epoch_cap_is_respected() {
        let cfg = TrainConfig {
            max_epochs: 3,
            delta_lms_threshold: 1e-300,
            patience: 100,
            ..TrainConfig::default()
        };
        let (_, r) = train(small_model(2), &small_split(2), &cfg).unwrap();
        assert_eq!(r.epochs_run, 3);
        assert_eq!(r.stop_reason, StopReason::MaxEpochs);
        assert_eq!(r.loss_curve.len(), 3);
        assert!(r.delta_lms_curve.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn best_fit_restores_best_validation_weights() {
        let split = small_split(3);
        let cfg = TrainConfig {
            max_epochs: 200,
            delta_lms_threshold: 1e-300,
            patience: 2,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let (model, r) = train(small_model(3), &split, &cfg).unwrap();
        assert_eq!(r.stop_reason, StopReason::BestFit);
        let best = r.val_accuracy_curve.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(r.final_val_accuracy, Some(best));
        let epoch = r.best_val_epoch.unwrap();
        assert_eq!(r.final_weights_epoch, epoch);
        assert_eq!(r.val_accuracy_curve[epoch - 1], best);
        assert_eq!(r.epochs_run, epoch + cfg.patience);
        // The restored weights are the ones reported on.
        assert_eq!(evaluate(&model, &split.test).unwrap().accuracy, r.test_accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            max_epochs: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(small_model(4), &small_split(4), &cfg).unwrap();
        let (m2, r2) = train(small_model(4), &small_split(4), &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.to_json(), r2.to_json());
        assert_eq!(m1.params(), m2.params());
        let other = TrainConfig { seed: 10, ..cfg };
        let (m3, _) = train(small_model(4), &small_split(4), &other).unwrap();
        assert_ne!(m1.params(), m3.params());
    }

    #[test]
    fn report_json_round_trip() {
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let (_, r) = train(small_model(5), &small_split(5), &cfg).unwrap();
        assert_eq!(r.version, REPORT_VERSION);
        assert_eq!(TrainReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.confusion.total(), r.test_frames);
        assert_eq!(r.train_confusion.total(), r.fit_frames + r.val_frames);
    }

    #[test]
    fn single_small_step_lowers_frame_loss() {
        let split = small_split(6);
        for seed in 0..20 {
            let mut model = small_model(seed);
            let frame = &split.train.frames[seed as usize];
            let label = frame.label.index();
            let (before, grads) = model.loss_and_grads(frame.values(), label).unwrap();
            model.sgd_step(&grads, 1e-4);
            let after = model.loss(frame.values(), label).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let split = small_split(7);
        let mut model = small_model(7);
        let last = model.dense_layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.biases = vec![1.0, -1.0];
        let balanced = {
            let counts = split.test.class_counts();
            let per = counts[0].min(counts[1]);
            let mut taken = [0, 0];
            let frames = split
                .test
                .iter()
                .filter(|f| {
                    let k = f.label.index();
                    taken[k] += 1;
                    taken[k] <= per
                })
                .cloned()
                .collect();
            split.test.with_frames(frames)
        };
        let e = evaluate(&model, &balanced).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e.confusion.total(), balanced.len());
        assert_eq!(e.confusion.0[0][1] + e.confusion.0[1][1], 0);
        assert_eq!(e.confusion.correct() as f64 / e.confusion.total() as f64, e.accuracy);
    }

    #[test]
    fn empty_sets_are_errors() {
        let split = small_split(8);
        let empty = DatasetSplit {
            train: split.train.with_frames(vec![]),
            ..split.clone()
        };
        assert!(matches!(
            train(small_model(8), &empty, &TrainConfig::default()),
            Err(TrainError::EmptyTrain)
        ));
        assert!(matches!(
            evaluate(&small_model(8), &empty.train),
            Err(TrainError::EmptyEval)
        ));
    }

    #[test]
    fn frame_length_mismatch() {
        let model = network::build_network(NetworkConfig::new(2, 2, 128, 8, 2, 48), 0).unwrap();
        assert!(matches!(
            train(model, &small_split(0), &TrainConfig::default()),
            Err(TrainError::FrameMismatch { expected: 128, found: 64 })
        ));
    }

    #[test]
    fn non_finite_loss_names_epoch() {
        let mut model = small_model(9);
        model.dense_layers[0].weights[0] = f64::NAN;
        let err = train(model, &small_split(9), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 1 }));
        assert!(err.to_string().contains("epoch 1"));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { max_epochs: 0, ..TrainConfig::default() },
            TrainConfig { delta_lms_threshold: 0.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(
                train(small_model(0), &small_split(0), &cfg),
                Err(TrainError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn gradient_check_small_config() {
        let cfg = NetworkConfig::new(2, 2, 64, 8, 2, 24);
        let r = gradient_check(&cfg, 11, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.layers.len(), 4);
        assert_eq!(r, gradient_check(&cfg, 11, 1e-4).unwrap());
    }

    #[test]
    fn gradient_check_flat_loss() {
        let mut model = small_model(12);
        for l in &mut model.dense_layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        model.dense_layers.last_mut().unwrap().biases = vec![0.0, 1000.0];
        let frame = vec![0.3; 64];
        let (_, grads) = model.loss_and_grads(&frame, 1).unwrap();
        assert!(grads.flatten().iter().all(|g| *g == 0.0));
        let r = gradient_check_model(&model, &frame, 1, 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }
}
