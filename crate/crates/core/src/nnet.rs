//! The shared multilayer perceptron.
//!
//! Hidden layers use ReLU, the output layer softmax, and training minimises
//! mean categorical cross-entropy with plain mini-batch SGD. Parameters live
//! in one flat vector so that aggregation can treat every model as a point in
//! `R^p`. Layout, per layer in order: the `out x in` weight matrix row-major,
//! then the `out` biases.

use std::io::{Read, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::dataset::{LabeledDataset, Matrix};
use crate::rng::seeded_rng;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("invalid layer spec: {0}")]
    Spec(String),
    #[error("input width {got} does not match model input {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("parameter vector has length {got}, spec needs {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("label {label} out of range for {classes} outputs")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt parameter file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl LayerSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self, NnetError> {
        let spec = Self { input_dim, hidden_dims, output_dim };
        if spec.dims().contains(&0) {
            return Err(NnetError::Spec(format!("all dimensions must be >= 1, got {:?}", spec.dims())));
        }
        Ok(spec)
    }

    /// Default network for the seven flow features and three classes.
    pub fn flow_default() -> Self {
        Self { input_dim: crate::NUM_FEATURES, hidden_dims: vec![64, 32], output_dim: crate::NUM_CLASSES }
    }

    /// `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    /// `Σ (in + 1) * out` over layers.
    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.dims()
            .windows(2)
            .map(|w| {
                let l = Layer { fan_in: w[0], fan_out: w[1], offset };
                offset += (w[0] + 1) * w[1];
                l
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, flat: &'a [f64]) -> &'a [f64] {
        &flat[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    fn biases<'a>(&self, flat: &'a [f64]) -> &'a [f64] {
        &flat[self.bias_offset()..self.bias_offset() + self.fan_out]
    }
}

/// Flat parameter vector plus the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: LayerSpec,
    flat: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &LayerSpec) -> Self {
        Self { spec: spec.clone(), flat: vec![0.0; spec.param_count()] }
    }

    pub fn from_flat(spec: &LayerSpec, flat: Vec<f64>) -> Result<Self, NnetError> {
        if flat.len() != spec.param_count() {
            return Err(NnetError::ParamLength { got: flat.len(), expected: spec.param_count() });
        }
        Ok(Self { spec: spec.clone(), flat })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    /// Weights and biases per layer, `(weights, biases)`.
    pub fn layer_slices(&self) -> Vec<(&[f64], &[f64])> {
        self.spec.layers().iter().map(|l| (l.weights(&self.flat), l.biases(&self.flat))).collect()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &LayerSpec, seed: u64) -> ModelParams {
    let mut rng = seeded_rng(seed);
    let mut params = ModelParams::zeros(spec);
    for l in spec.layers() {
        let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        for w in &mut params.flat[l.offset..l.bias_offset()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 128, learning_rate: 0.01, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        if self.epochs == 0 {
            return Err(NnetError::TrainConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnetError::TrainConfig("batch size must be >= 1".into()));
        }
        // Zero is accepted here (it yields the identity update); experiment
        // configs require a strictly positive rate.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(NnetError::TrainConfig("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn check_width(params: &ModelParams, width: usize) -> Result<(), NnetError> {
    if width != params.spec.input_dim {
        return Err(NnetError::InputWidth { got: width, expected: params.spec.input_dim });
    }
    Ok(())
}

/// Per-layer outputs for one batch. `acts[0]` is the input, `acts[L]` the
/// output logits; hidden entries are post-ReLU.
struct Activations {
    acts: Vec<Vec<f64>>,
}

fn forward_rows<'a>(params: &ModelParams, rows: impl Iterator<Item = &'a [f64]>, n: usize) -> Activations {
    let layers = params.spec.layers();
    let mut input = Vec::with_capacity(n * params.spec.input_dim);
    for r in rows {
        input.extend_from_slice(r);
    }
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input);
    for (li, l) in layers.iter().enumerate() {
        let w = l.weights(&params.flat);
        let b = l.biases(&params.flat);
        let prev = &acts[li];
        let mut out = vec![0.0; n * l.fan_out];
        for s in 0..n {
            let x = &prev[s * l.fan_in..(s + 1) * l.fan_in];
            let y = &mut out[s * l.fan_out..(s + 1) * l.fan_out];
            for (o, yo) in y.iter_mut().enumerate() {
                let wr = &w[o * l.fan_in..(o + 1) * l.fan_in];
                *yo = b[o] + wr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            if li + 1 < layers.len() {
                for v in y.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        acts.push(out);
    }
    Activations { acts }
}

/// Numerically stable softmax of one logit row, written in place. Returns
/// the log-sum-exp of the row.
fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for z in row.iter_mut() {
        *z = (*z - lse).exp();
    }
    lse
}

/// Class probabilities, one row per input row.
pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<Matrix, NnetError> {
    check_width(params, inputs.cols())?;
    let n = inputs.rows();
    let mut acts = forward_rows(params, inputs.iter_rows(), n);
    let k = params.spec.output_dim;
    let mut logits = acts.acts.pop().expect("output layer");
    for row in logits.chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    Ok(Matrix::from_vec(k, logits).expect("output width divides buffer"))
}

/// Argmax class per row, ties toward the lower class code.
pub fn predict(params: &ModelParams, inputs: &Matrix) -> Result<Vec<usize>, NnetError> {
    let probs = forward(params, inputs)?;
    Ok(probs.iter_rows().map(argmax).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn loss_and_grad_rows(params: &ModelParams, data: &LabeledDataset, idx: &[usize]) -> Result<(f64, Vec<f64>), NnetError> {
    let n = idx.len();
    if n == 0 {
        return Err(NnetError::EmptyBatch);
    }
    let k = params.spec.output_dim;
    for &i in idx {
        if data.label(i) >= k {
            return Err(NnetError::Label { label: data.label(i), classes: k });
        }
    }
    let layers = params.spec.layers();
    let mut acts = forward_rows(params, idx.iter().map(|&i| data.row(i)), n).acts;

    // Output delta: (softmax - onehot) / n.
    let mut loss = 0.0;
    let mut delta = acts.pop().expect("output layer");
    let inv_n = 1.0 / n as f64;
    for (s, row) in delta.chunks_exact_mut(k).enumerate() {
        let y = data.label(idx[s]);
        let z_true = row[y];
        let lse = softmax_in_place(row);
        loss += lse - z_true;
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    loss *= inv_n;

    let mut grad = vec![0.0; params.flat.len()];
    for li in (0..layers.len()).rev() {
        let l = layers[li];
        let a_prev = &acts[li];
        let w = l.weights(&params.flat);
        let (gw, gb) = grad[l.offset..l.bias_offset() + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
        for s in 0..n {
            let d = &delta[s * l.fan_out..(s + 1) * l.fan_out];
            let x = &a_prev[s * l.fan_in..(s + 1) * l.fan_in];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[o] += dv;
                for (g, &xv) in gw[o * l.fan_in..(o + 1) * l.fan_in].iter_mut().zip(x) {
                    *g += dv * xv;
                }
            }
        }
        if li == 0 {
            break;
        }
        let mut prev_delta = vec![0.0; n * l.fan_in];
        for s in 0..n {
            let d = &delta[s * l.fan_out..(s + 1) * l.fan_out];
            let pd = &mut prev_delta[s * l.fan_in..(s + 1) * l.fan_in];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (p, &wv) in pd.iter_mut().zip(&w[o * l.fan_in..(o + 1) * l.fan_in]) {
                    *p += dv * wv;
                }
            }
            // ReLU derivative; hidden activations are zero exactly where the unit is off.
            for (p, &a) in pd.iter_mut().zip(&a_prev[s * l.fan_in..(s + 1) * l.fan_in]) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev_delta;
    }
    Ok((loss, grad))
}

/// Mean cross-entropy over `batch` and its gradient with respect to the flat
/// parameters.
pub fn loss_and_grad(params: &ModelParams, batch: &LabeledDataset) -> Result<(f64, Vec<f64>), NnetError> {
    check_width(params, batch.dim())?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    loss_and_grad_rows(params, batch, &idx)
}

/// Mean cross-entropy without the gradient.
pub fn loss(params: &ModelParams, data: &LabeledDataset) -> Result<f64, NnetError> {
    loss_and_grad(params, data).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    /// Mean mini-batch loss over the final epoch; `None` when nothing ran.
    pub mean_loss: Option<f64>,
    pub steps: usize,
}

/// Mini-batch SGD for `config.epochs` epochs, reshuffling every epoch.
pub fn train_local(params: &ModelParams, data: &LabeledDataset, config: &TrainConfig) -> Result<ModelParams, NnetError> {
    train_local_with_stats(params, data, config).map(|(p, _)| p)
}

pub fn train_local_with_stats(
    params: &ModelParams,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainStats), NnetError> {
    config.validate()?;
    if data.is_empty() {
        warn!("train_local called with an empty dataset; parameters unchanged");
        return Ok((params.clone(), TrainStats { mean_loss: None, steps: 0 }));
    }
    check_width(params, data.dim())?;
    let mut rng = seeded_rng(config.seed);
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut last_epoch_loss = 0.0;
    let mut last_epoch_batches = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        last_epoch_loss = 0.0;
        last_epoch_batches = 0;
        for batch in order.chunks(config.batch_size) {
            let (l, g) = loss_and_grad_rows(&current, data, batch)?;
            for (p, gv) in current.flat.iter_mut().zip(&g) {
                *p -= config.learning_rate * gv;
            }
            last_epoch_loss += l;
            last_epoch_batches += 1;
            steps += 1;
        }
    }
    if !current.is_finite() {
        return Err(NnetError::TrainConfig("training diverged to non-finite parameters".into()));
    }
    Ok((current, TrainStats { mean_loss: Some(last_epoch_loss / last_epoch_batches as f64), steps }))
}

/// Binary layout, all little-endian: `u32` dim count, that many `u32` dims
/// (`input, hidden..., output`), `u64` value count, then the `f64` values.
pub fn write_params<W: Write>(mut out: W, params: &ModelParams) -> Result<(), NnetError> {
    let dims = params.spec.dims();
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&(params.flat.len() as u64).to_le_bytes())?;
    for v in &params.flat {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(mut input: R) -> Result<ModelParams, NnetError> {
    fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnetError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let n_dims = read_u32(&mut input)? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(NnetError::Format(format!("implausible layer count {n_dims}")));
    }
    let dims: Vec<usize> = (0..n_dims).map(|_| read_u32(&mut input).map(|d| d as usize)).collect::<Result<_, _>>()?;
    let spec = LayerSpec::new(dims[0], dims[1..n_dims - 1].to_vec(), dims[n_dims - 1])?;
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    if len != spec.param_count() {
        return Err(NnetError::ParamLength { got: len, expected: spec.param_count() });
    }
    let mut flat = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut b8)?;
        flat.push(f64::from_le_bytes(b8));
    }
    ModelParams::from_flat(&spec, flat)
}
