//! Numeric kernels for the 1D CNN-MLP and their backward passes.
//!
//! Everything works on plain `f64` slices. Summation orders are fixed and
//! documented per kernel so results are reproducible bit for bit:
//!
//! * `conv1d_valid`: `y[t]` starts at `0.0` and accumulates `w[j] * x[t + j]`
//!   for `j = 0..K` in order.
//! * `conv_layer_forward`: `x_k[t]` starts at `b_k` and adds each input map's
//!   convolution for `i = 0..N_in` in order.
//! * `dense_forward`: `y[o]` starts at `b[o]` and accumulates `W[o][i] * x[i]`.
//! * `subsample_avg`: bin sum from `0.0`, divided by the rate.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("kernel longer than input ({kernel} > {input})")]
    KernelTooLong { kernel: usize, input: usize },
    #[error("input maps have mismatched lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("expected {expected} input values, got {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("subsampling rate must be at least 1")]
    ZeroRate,
    #[error("trace does not match layer: {0}")]
    StaleTrace(String),
}

/// Cross-correlation with no padding: `y[t] = Σ_j w[j]·x[t+j]`.
pub fn conv1d_valid(x: &[f64], w: &[f64]) -> Result<Vec<f64>, NnError> {
    check_kernel(x.len(), w.len())?;
    let mut y = vec![0.0; x.len() - w.len() + 1];
    correlate_into(x, w, &mut y);
    Ok(y)
}

fn check_kernel(input: usize, kernel: usize) -> Result<(), NnError> {
    if kernel == 0 {
        return Err(NnError::EmptyInput);
    }
    if kernel > input {
        return Err(NnError::KernelTooLong { kernel, input });
    }
    Ok(())
}

/// `y[t] += w[j]·x[t+j]` looping `j` outermost, which keeps each output's
/// accumulation order `j = 0, 1, ...` while vectorising across `t`.
fn correlate_into(x: &[f64], w: &[f64], y: &mut [f64]) {
    let n = y.len();
    for (j, &wj) in w.iter().enumerate() {
        for (yt, &xt) in y.iter_mut().zip(&x[j..j + n]) {
            *yt += wj * xt;
        }
    }
}

/// Convolutional layer parameters: `out_maps × in_maps` kernels and one
/// bias per output map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel_len: usize,
    /// Row-major `[out][in][j]`.
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_maps: usize, out_maps: usize, kernel_len: usize) -> Self {
        Self {
            in_maps,
            out_maps,
            kernel_len,
            kernels: vec![0.0; in_maps * out_maps * kernel_len],
            biases: vec![0.0; out_maps],
        }
    }

    pub fn kernel(&self, out: usize, input: usize) -> &[f64] {
        let at = (out * self.in_maps + input) * self.kernel_len;
        &self.kernels[at..at + self.kernel_len]
    }

    pub fn kernel_mut(&mut self, out: usize, input: usize) -> &mut [f64] {
        let at = (out * self.in_maps + input) * self.kernel_len;
        &mut self.kernels[at..at + self.kernel_len]
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }
}

/// What the conv backward pass needs from the forward call.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    pub inputs: Vec<Vec<f64>>,
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel_len: usize,
}

impl ConvTrace {
    pub fn input_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_len(&self) -> usize {
        self.input_len() + 1 - self.kernel_len
    }
}

/// `x_k = b_k + Σ_i conv1d_valid(inputs[i], w[k][i])`.
pub fn conv_layer_forward(
    inputs: &[Vec<f64>],
    layer: &ConvLayer,
) -> Result<(Vec<Vec<f64>>, ConvTrace), NnError> {
    let out = conv_layer_apply(inputs, layer)?;
    let trace = ConvTrace {
        inputs: inputs.to_vec(),
        in_maps: layer.in_maps,
        out_maps: layer.out_maps,
        kernel_len: layer.kernel_len,
    };
    Ok((out, trace))
}

/// Forward pass without recording a trace.
pub fn conv_layer_apply(inputs: &[Vec<f64>], layer: &ConvLayer) -> Result<Vec<Vec<f64>>, NnError> {
    if inputs.len() != layer.in_maps {
        return Err(NnError::WidthMismatch {
            expected: layer.in_maps,
            found: inputs.len(),
        });
    }
    let len = inputs.first().map_or(0, Vec::len);
    if let Some(bad) = inputs.iter().find(|m| m.len() != len) {
        return Err(NnError::LengthMismatch(len, bad.len()));
    }
    check_kernel(len, layer.kernel_len)?;
    let out_len = len - layer.kernel_len + 1;
    let mut scratch = vec![0.0; out_len];
    let outputs = (0..layer.out_maps)
        .map(|k| {
            let mut acc = vec![layer.biases[k]; out_len];
            for (i, input) in inputs.iter().enumerate() {
                scratch.fill(0.0);
                correlate_into(input, layer.kernel(k, i), &mut scratch);
                for (a, s) in acc.iter_mut().zip(&scratch) {
                    *a += s;
                }
            }
            acc
        })
        .collect();
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
    /// Gradient with respect to each input map, when requested.
    pub inputs: Option<Vec<Vec<f64>>>,
}

/// Gradients of `conv_layer_forward` given `upstream = ∂L/∂x_k`.
pub fn conv_layer_backward(
    layer: &ConvLayer,
    trace: &ConvTrace,
    upstream: &[Vec<f64>],
    want_input_grad: bool,
) -> Result<ConvGrads, NnError> {
    if trace.in_maps != layer.in_maps
        || trace.out_maps != layer.out_maps
        || trace.kernel_len != layer.kernel_len
        || trace.inputs.len() != layer.in_maps
    {
        return Err(NnError::StaleTrace(format!(
            "trace is {}x{}x{}, layer is {}x{}x{}",
            trace.out_maps, trace.in_maps, trace.kernel_len, layer.out_maps, layer.in_maps, layer.kernel_len
        )));
    }
    let out_len = trace.output_len();
    if upstream.len() != layer.out_maps || upstream.iter().any(|g| g.len() != out_len) {
        return Err(NnError::StaleTrace(format!(
            "upstream gradient shape does not match {} maps of length {}",
            layer.out_maps, out_len
        )));
    }

    let k_len = layer.kernel_len;
    let mut kernels = vec![0.0; layer.kernels.len()];
    let mut biases = vec![0.0; layer.out_maps];
    let mut inputs = want_input_grad.then(|| vec![vec![0.0; trace.input_len()]; layer.in_maps]);

    for (k, g) in upstream.iter().enumerate() {
        biases[k] = g.iter().sum();
        for (i, x) in trace.inputs.iter().enumerate() {
            let at = (k * layer.in_maps + i) * k_len;
            let dw = &mut kernels[at..at + k_len];
            for (j, d) in dw.iter_mut().enumerate() {
                *d = g.iter().zip(&x[j..j + out_len]).map(|(a, b)| a * b).sum();
            }
            if let Some(dx) = inputs.as_mut() {
                let dx = &mut dx[i];
                for (j, &wj) in layer.kernel(k, i).iter().enumerate() {
                    for (d, &gt) in dx[j..j + out_len].iter_mut().zip(g) {
                        *d += wj * gt;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        kernels,
        biases,
        inputs,
    })
}

pub fn activate_tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Backward of tanh from its *output* `y`: `upstream · (1 - y²)`.
pub fn tanh_backward(activated: &[f64], upstream: &[f64]) -> Vec<f64> {
    activated
        .iter()
        .zip(upstream)
        .map(|(y, g)| g * (1.0 - y * y))
        .collect()
}

/// Non-overlapping average pooling; the `len % rate` tail is dropped.
pub fn subsample_avg(x: &[f64], rate: usize) -> Result<Vec<f64>, NnError> {
    if rate == 0 {
        return Err(NnError::ZeroRate);
    }
    let denom = rate as f64;
    Ok(x.chunks_exact(rate)
        .map(|bin| bin.iter().fold(0.0, |acc, v| acc + v) / denom)
        .collect())
}

/// Spreads each pooled gradient evenly over its bin; dropped tail gets zero.
pub fn subsample_backward(upstream: &[f64], input_len: usize, rate: usize) -> Result<Vec<f64>, NnError> {
    if rate == 0 {
        return Err(NnError::ZeroRate);
    }
    if upstream.len() != input_len / rate {
        return Err(NnError::WidthMismatch {
            expected: input_len / rate,
            found: upstream.len(),
        });
    }
    let mut out = vec![0.0; input_len];
    for (bin, g) in out.chunks_exact_mut(rate).zip(upstream) {
        bin.fill(g / rate as f64);
    }
    Ok(out)
}

/// Collapses a feature map to its mean.
pub fn global_collapse(x: &[f64]) -> Result<f64, NnError> {
    if x.is_empty() {
        return Err(NnError::EmptyInput);
    }
    Ok(x.iter().fold(0.0, |acc, v| acc + v) / x.len() as f64)
}

pub fn collapse_backward(upstream: f64, len: usize) -> Vec<f64> {
    vec![upstream / len as f64; len]
}

/// Fully connected layer, `y = Wx + b` with `W` row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    pub fn row(&self, out: usize) -> &[f64] {
        &self.weights[out * self.inputs..(out + 1) * self.inputs]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

pub fn dense_forward(x: &[f64], layer: &DenseLayer) -> Result<Vec<f64>, NnError> {
    if x.len() != layer.inputs {
        return Err(NnError::WidthMismatch {
            expected: layer.inputs,
            found: x.len(),
        });
    }
    Ok((0..layer.outputs)
        .map(|o| {
            layer
                .row(o)
                .iter()
                .zip(x)
                .fold(layer.biases[o], |acc, (w, v)| acc + w * v)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn dense_backward(layer: &DenseLayer, input: &[f64], upstream: &[f64]) -> Result<DenseGrads, NnError> {
    if input.len() != layer.inputs {
        return Err(NnError::WidthMismatch {
            expected: layer.inputs,
            found: input.len(),
        });
    }
    if upstream.len() != layer.outputs {
        return Err(NnError::WidthMismatch {
            expected: layer.outputs,
            found: upstream.len(),
        });
    }
    let mut weights = Vec::with_capacity(layer.weights.len());
    let mut grad_in = vec![0.0; layer.inputs];
    for (o, &g) in upstream.iter().enumerate() {
        weights.extend(input.iter().map(|x| g * x));
        for (d, w) in grad_in.iter_mut().zip(layer.row(o)) {
            *d += g * w;
        }
    }
    Ok(DenseGrads {
        weights,
        biases: upstream.to_vec(),
        input: grad_in,
    })
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient
/// with respect to the logits (`p - onehot`).
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < logits.len(), "label {label} out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = log_total - (logits[label] - max);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, zero when both are exactly zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 0.0)
}

/// Like [`relative_error`], with the denominator bounded below by `floor`
/// so that components indistinguishable from zero compare absolutely.
pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
