//! From-scratch 1D CNN-MLP engine for classifying stress from raw PPG
//! (blood volume pulse) recordings.
//!
//! The crate is organised bottom-up:
//!
//! * [`signal`]: normalisation, frame striding, Chebyshev-II filtering and a
//!   synthetic pulse generator.
//! * [`dataset`]: per-class subject matrices, labelled frames, splits and
//!   the on-disk cache.
//! * [`nn`]: numeric kernels and their hand-derived backward passes.
//! * [`network`]: CNN-MLP assembly, inference and checkpoints.
//! * [`trainer`]: online SGD with the three stopping rules.
//! * [`sweep`]: hyperparameter grids and report emission.

pub mod archive;
pub mod dataset;
pub mod network;
pub mod nn;
pub mod seed;
pub mod signal;
pub mod sweep;
pub mod trainer;

pub use dataset::{ClassMatrix, ClassVectors, DatasetSplit, SplitMode};
pub use network::{ModelState, NetworkConfig};
pub use signal::{Class, Frame, FrameSet, PpgSignal, Task};
pub use trainer::{StopReason, TrainConfig, TrainReport};
