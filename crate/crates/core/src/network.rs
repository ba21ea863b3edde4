//! CNN-MLP assembly, inference and checkpointing.
//!
//! A model is `n` convolutional stages followed by `m` dense layers. Stages
//! `1..n-1` run conv → tanh → average subsampling. The last stage runs
//! conv → tanh → mean collapse, so every feature map reaches the MLP as one
//! scalar whatever the frame size. When the configured kernel is longer than
//! the signal entering the last stage, that stage's kernel is shortened to the
//! signal length and produces a single value per map.
//!
//! `m` counts every dense layer including the output layer: `m = 2` is one
//! hidden layer of `mlp_units` tanh units and a linear output of `classes`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError};
use crate::nn::{self, ConvLayer, ConvTrace, DenseLayer, NnError};
use crate::seed;

type Maps = Vec<Vec<f64>>;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("infeasible geometry at CNN layer {layer}: {reason}")]
    Infeasible { layer: usize, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("frame has {found} samples, model expects {expected}")]
    FrameLength { expected: usize, found: usize },
    #[error("parameter vector has {found} values, model has {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error(transparent)]
    Kernel(#[from] NnError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Structure parameters of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of convolutional layers (`n`).
    pub cnn_layers: usize,
    /// Number of dense layers including the output layer (`m`).
    pub mlp_layers: usize,
    /// Frame size in samples (`Fsize`).
    pub frame_size: usize,
    /// Convolution kernel length (`fsize`).
    pub filter_size: usize,
    /// Average-pooling factor between CNN layers (`SS`).
    pub subsampling: usize,
    /// Framing stride. Not part of the model itself; kept with the
    /// configuration so a result row is self-describing.
    pub stride: usize,
    pub cnn_maps: usize,
    pub mlp_units: usize,
    pub classes: usize,
}

pub const GRID_CNN_LAYERS: [usize; 2] = [2, 3];
pub const GRID_MLP_LAYERS: [usize; 2] = [2, 3];
pub const GRID_FRAME_SIZES: [usize; 6] = [2048, 1024, 512, 256, 128, 64];
pub const GRID_FILTER_SIZES: [usize; 3] = [128, 64, 32];
pub const GRID_SUBSAMPLING: [usize; 4] = [8, 6, 4, 2];
pub const GRID_STRIDES: [usize; 6] = [24, 12, 10, 8, 5, 2];

impl NetworkConfig {
    /// Config with the fixed widths: 8 maps per CNN layer, 5 units per hidden
    /// dense layer, two classes.
    pub fn new(
        cnn_layers: usize,
        mlp_layers: usize,
        frame_size: usize,
        filter_size: usize,
        subsampling: usize,
        stride: usize,
    ) -> Self {
        Self {
            cnn_layers,
            mlp_layers,
            frame_size,
            filter_size,
            subsampling,
            stride,
            cnn_maps: 8,
            mlp_units: 5,
            classes: 2,
        }
    }

    /// Whether every parameter lies in the tested domain. The grid also
    /// admits the filter sizes 16 and 512, which appear in reported runs.
    pub fn in_grid_domain(&self) -> bool {
        GRID_CNN_LAYERS.contains(&self.cnn_layers)
            && GRID_MLP_LAYERS.contains(&self.mlp_layers)
            && GRID_FRAME_SIZES.contains(&self.frame_size)
            && (GRID_FILTER_SIZES.contains(&self.filter_size) || [16, 512].contains(&self.filter_size))
            && GRID_SUBSAMPLING.contains(&self.subsampling)
            && GRID_STRIDES.contains(&self.stride)
    }

    /// Shape walk through the CNN stack.
    pub fn geometry(&self) -> Result<Vec<StageGeometry>, NetworkError> {
        let positive = [
            ("n", self.cnn_layers),
            ("m", self.mlp_layers),
            ("Fsize", self.frame_size),
            ("fsize", self.filter_size),
            ("SS", self.subsampling),
            ("stride", self.stride),
            ("cnn_maps", self.cnn_maps),
            ("mlp_units", self.mlp_units),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NetworkError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.classes < 2 {
            return Err(NetworkError::InvalidConfig("classes must be at least 2".into()));
        }

        let mut stages = Vec::with_capacity(self.cnn_layers);
        let mut len = self.frame_size;
        for layer in 1..=self.cnn_layers {
            let last = layer == self.cnn_layers;
            let kernel_len = if last {
                self.filter_size.min(len)
            } else if self.filter_size > len {
                return Err(NetworkError::Infeasible {
                    layer,
                    reason: format!("kernel of {} exceeds input of {len} samples", self.filter_size),
                });
            } else {
                self.filter_size
            };
            let conv_len = len - kernel_len + 1;
            let out_len = if last { 1 } else { conv_len / self.subsampling };
            if out_len == 0 {
                return Err(NetworkError::Infeasible {
                    layer,
                    reason: format!(
                        "subsampling {} leaves no samples from {conv_len}",
                        self.subsampling
                    ),
                });
            }
            stages.push(StageGeometry {
                layer,
                in_len: len,
                kernel_len,
                conv_len,
                out_len,
                collapse: last,
            });
            len = out_len;
        }
        Ok(stages)
    }

    /// Dense layer widths as `(inputs, outputs)`.
    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.mlp_layers)
            .map(|i| {
                let inputs = if i == 0 { self.cnn_maps } else { self.mlp_units };
                let outputs = if i + 1 == self.mlp_layers {
                    self.classes
                } else {
                    self.mlp_units
                };
                (inputs, outputs)
            })
            .collect()
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> Result<usize, NetworkError> {
        let geo = self.geometry()?;
        let conv: usize = geo
            .iter()
            .map(|s| {
                let in_maps = if s.layer == 1 { 1 } else { self.cnn_maps };
                in_maps * self.cnn_maps * s.kernel_len + self.cnn_maps
            })
            .sum();
        let dense: usize = self.dense_shapes().iter().map(|(i, o)| i * o + o).sum();
        Ok(conv + dense)
    }
}

/// Lengths through one CNN stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub layer: usize,
    pub in_len: usize,
    pub kernel_len: usize,
    pub conv_len: usize,
    /// Length after pooling; 1 for the collapsing stage.
    pub out_len: usize,
    pub collapse: bool,
}

/// Trained or freshly initialised model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub conv_layers: Vec<ConvLayer>,
    pub dense_layers: Vec<DenseLayer>,
    pub init_seed: u64,
}

/// Per-stage intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvStageTrace {
    pub conv: ConvTrace,
    pub activated: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DenseStageTrace {
    pub input: Vec<f64>,
    /// Layer output after its activation (raw logits for the final layer).
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub conv: Vec<ConvStageTrace>,
    pub dense: Vec<DenseStageTrace>,
    pub logits: Vec<f64>,
}

/// Gradients shaped like the model, in the same flat order as
/// [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub conv: Vec<(Vec<f64>, Vec<f64>)>,
    pub dense: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ModelGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.conv.iter().chain(&self.dense) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

fn glorot(r: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| r.random_range(-limit..=limit)).collect()
}

/// Builds a model with Glorot-uniform weights and zero biases.
pub fn build_network(config: NetworkConfig, seed: u64) -> Result<ModelState, NetworkError> {
    let geo = config.geometry()?;
    let mut rng = seed::rng(seed);
    let conv_layers = geo
        .iter()
        .map(|s| {
            let in_maps = if s.layer == 1 { 1 } else { config.cnn_maps };
            let mut layer = ConvLayer::zeros(in_maps, config.cnn_maps, s.kernel_len);
            layer.kernels = glorot(
                &mut rng,
                in_maps * s.kernel_len,
                config.cnn_maps * s.kernel_len,
                layer.kernels.len(),
            );
            layer
        })
        .collect();
    let dense_layers = config
        .dense_shapes()
        .into_iter()
        .map(|(i, o)| {
            let mut layer = DenseLayer::zeros(i, o);
            layer.weights = glorot(&mut rng, i, o, i * o);
            layer
        })
        .collect();
    Ok(ModelState {
        config,
        conv_layers,
        dense_layers,
        init_seed: seed,
    })
}

impl ModelState {
    fn check_frame(&self, frame: &[f64]) -> Result<(), NetworkError> {
        if frame.len() != self.config.frame_size {
            return Err(NetworkError::FrameLength {
                expected: self.config.frame_size,
                found: frame.len(),
            });
        }
        Ok(())
    }

    /// Activated maps and the pooled (or collapsed) stage output.
    fn cnn_stage(&self, idx: usize, maps: &[Vec<f64>]) -> Result<(Maps, Maps), NetworkError> {
        let pre = nn::conv_layer_apply(maps, &self.conv_layers[idx])?;
        let activated: Vec<Vec<f64>> = pre.iter().map(|x| nn::activate_tanh(x)).collect();
        let pooled = if idx + 1 == self.conv_layers.len() {
            activated
                .iter()
                .map(|a| nn::global_collapse(a).map(|c| vec![c]))
                .collect::<Result<_, _>>()?
        } else {
            activated
                .iter()
                .map(|a| nn::subsample_avg(a, self.config.subsampling))
                .collect::<Result<_, _>>()?
        };
        Ok((activated, pooled))
    }

    fn dense_stage(&self, idx: usize, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let z = nn::dense_forward(x, &self.dense_layers[idx])?;
        Ok(if idx + 1 == self.dense_layers.len() {
            z
        } else {
            nn::activate_tanh(&z)
        })
    }

    /// Raw output-layer values for one frame.
    pub fn logits(&self, frame: &[f64]) -> Result<Vec<f64>, NetworkError> {
        self.check_frame(frame)?;
        let mut maps = vec![frame.to_vec()];
        for idx in 0..self.conv_layers.len() {
            maps = self.cnn_stage(idx, &maps)?.1;
        }
        let mut x: Vec<f64> = maps.into_iter().flatten().collect();
        for idx in 0..self.dense_layers.len() {
            x = self.dense_stage(idx, &x)?;
        }
        Ok(x)
    }

    /// Class probabilities plus everything the backward pass needs.
    pub fn forward(&self, frame: &[f64]) -> Result<(Vec<f64>, ForwardTrace), NetworkError> {
        self.check_frame(frame)?;
        let mut maps = vec![frame.to_vec()];
        let mut conv = Vec::with_capacity(self.conv_layers.len());
        for idx in 0..self.conv_layers.len() {
            let (activated, pooled) = self.cnn_stage(idx, &maps)?;
            let layer = &self.conv_layers[idx];
            conv.push(ConvStageTrace {
                conv: ConvTrace {
                    inputs: std::mem::replace(&mut maps, pooled),
                    in_maps: layer.in_maps,
                    out_maps: layer.out_maps,
                    kernel_len: layer.kernel_len,
                },
                activated,
            });
        }
        let mut x: Vec<f64> = maps.into_iter().flatten().collect();
        let mut dense = Vec::with_capacity(self.dense_layers.len());
        for idx in 0..self.dense_layers.len() {
            let out = self.dense_stage(idx, &x)?;
            dense.push(DenseStageTrace {
                input: std::mem::replace(&mut x, out.clone()),
                output: out,
            });
        }
        let probs = nn::softmax(&x);
        Ok((
            probs,
            ForwardTrace {
                conv,
                dense,
                logits: x,
            },
        ))
    }

    /// Argmax of the forward probabilities, ties to the lower class.
    pub fn predict(&self, frame: &[f64]) -> Result<usize, NetworkError> {
        let (probs, _) = self.forward(frame)?;
        Ok(argmax(&probs))
    }

    /// Cross-entropy loss of one frame.
    pub fn loss(&self, frame: &[f64], label: usize) -> Result<f64, NetworkError> {
        Ok(nn::softmax_xent(&self.logits(frame)?, label).0)
    }

    /// Loss and exact parameter gradients for one labelled frame.
    pub fn loss_and_grads(&self, frame: &[f64], label: usize) -> Result<(f64, ModelGrads), NetworkError> {
        let (_, trace) = self.forward(frame)?;
        self.backward(&trace, label)
    }

    pub fn backward(&self, trace: &ForwardTrace, label: usize) -> Result<(f64, ModelGrads), NetworkError> {
        let (loss, mut upstream) = nn::softmax_xent(&trace.logits, label);

        let mut dense = vec![(Vec::new(), Vec::new()); self.dense_layers.len()];
        for idx in (0..self.dense_layers.len()).rev() {
            let stage = &trace.dense[idx];
            if idx + 1 != self.dense_layers.len() {
                upstream = nn::tanh_backward(&stage.output, &upstream);
            }
            let g = nn::dense_backward(&self.dense_layers[idx], &stage.input, &upstream)?;
            dense[idx] = (g.weights, g.biases);
            upstream = g.input;
        }

        // `upstream` now holds one value per final feature map.
        let mut map_grads: Vec<Vec<f64>> = upstream.into_iter().map(|g| vec![g]).collect();
        let mut conv = vec![(Vec::new(), Vec::new()); self.conv_layers.len()];
        for idx in (0..self.conv_layers.len()).rev() {
            let stage = &trace.conv[idx];
            let last = idx + 1 == self.conv_layers.len();
            let pre_grads: Vec<Vec<f64>> = stage
                .activated
                .iter()
                .zip(&map_grads)
                .map(|(a, g)| {
                    let da = if last {
                        nn::collapse_backward(g[0], a.len())
                    } else {
                        nn::subsample_backward(g, a.len(), self.config.subsampling)?
                    };
                    Ok(nn::tanh_backward(a, &da))
                })
                .collect::<Result<_, NnError>>()?;
            let g = nn::conv_layer_backward(&self.conv_layers[idx], &stage.conv, &pre_grads, idx > 0)?;
            conv[idx] = (g.kernels, g.biases);
            if let Some(inputs) = g.inputs {
                map_grads = inputs;
            }
        }
        Ok((loss, ModelGrads { conv, dense }))
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers.iter().map(ConvLayer::param_count).sum::<usize>()
            + self.dense_layers.iter().map(DenseLayer::param_count).sum::<usize>()
    }

    /// `(name, count)` per parameter block, in flat order.
    pub fn layer_blocks(&self) -> Vec<(String, usize)> {
        let conv = self
            .conv_layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("conv{}", i + 1), l.param_count()));
        let dense = self
            .dense_layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("dense{}", i + 1), l.param_count()));
        conv.chain(dense).collect()
    }

    /// All parameters: per conv layer kernels then biases, then per dense
    /// layer weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.conv_layers {
            out.extend_from_slice(&l.kernels);
            out.extend_from_slice(&l.biases);
        }
        for l in &self.dense_layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NetworkError> {
        if params.len() != self.param_count() {
            return Err(NetworkError::ParamCount {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut rest = params;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for l in &mut self.conv_layers {
            take(&mut l.kernels);
            take(&mut l.biases);
        }
        for l in &mut self.dense_layers {
            take(&mut l.weights);
            take(&mut l.biases);
        }
        Ok(())
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &ModelGrads, lr: f64) {
        let step = |p: &mut [f64], g: &[f64]| {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= lr * gi;
            }
        };
        for (l, (gw, gb)) in self.conv_layers.iter_mut().zip(&grads.conv) {
            step(&mut l.kernels, gw);
            step(&mut l.biases, gb);
        }
        for (l, (gw, gb)) in self.dense_layers.iter_mut().zip(&grads.dense) {
            step(&mut l.weights, gw);
            step(&mut l.biases, gb);
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: NetworkConfig,
    init_seed: u64,
    param_count: usize,
    #[serde(default)]
    annotations: serde_json::Value,
}

pub fn encode_checkpoint(model: &ModelState, annotations: &serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        format: "stressnet-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        config: model.config,
        init_seed: model.init_seed,
        param_count: model.param_count(),
        annotations: annotations.clone(),
    };
    let json = serde_json::to_string(&header).expect("header serialises");
    archive::encode(CHECKPOINT_MAGIC, &json, &model.params())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelState, serde_json::Value), CheckpointError> {
    let (json, params) = archive::decode(CHECKPOINT_MAGIC, "checkpoint", bytes)?;
    let raw: serde_json::Value =
        serde_json::from_str(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Header("missing version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(CheckpointError::Version {
            found: version as u32,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader =
        serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut model = build_network(header.config, header.init_seed)?;
    if header.param_count != params.len() {
        return Err(CheckpointError::Header(format!(
            "header declares {} parameters, blob holds {}",
            header.param_count,
            params.len()
        )));
    }
    model.set_params(&params)?;
    Ok((model, header.annotations))
}

pub fn save_model(model: &ModelState, path: &Path) -> Result<(), CheckpointError> {
    save_model_annotated(model, &serde_json::Value::Null, path)
}

/// Saves with free-form metadata (e.g. the split used in training).
pub fn save_model_annotated(
    model: &ModelState,
    annotations: &serde_json::Value,
    path: &Path,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(model, annotations)).map_err(ArchiveError::from)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelState, CheckpointError> {
    Ok(load_model_annotated(path)?.0)
}

pub fn load_model_annotated(path: &Path) -> Result<(ModelState, serde_json::Value), CheckpointError> {
    let bytes = std::fs::read(path).map_err(ArchiveError::from)?;
    decode_checkpoint(&bytes)
}
