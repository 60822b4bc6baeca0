//! Tiny dense models with closed-form backpropagation.
//!
//! A model is a stack of dense layers `z = W a + b`, each followed by an
//! optional `tanh`. The two architectures used throughout the crate are the
//! linear model (one layer, no activation) and the one-hidden-layer tanh MLP.
//!
//! Parameters are stored flat in a fixed order: layer 0 weights (row-major,
//! `outputs x inputs`), layer 0 bias, layer 1 weights, layer 1 bias, ...

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, Range};
use core::str::FromStr;

use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("model must have at least one layer")]
    NoLayers,
    #[error("layer {layer} has a zero dimension")]
    ZeroDimension { layer: usize },
    #[error("layer {layer} expects {expected} inputs but previous layer emits {got}")]
    LayerChain { layer: usize, expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset row {row} has dimension {got}, expected {expected}")]
    RaggedDataset { row: usize, expected: usize, got: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("unknown loss kind `{0}`")]
    UnknownLoss(String),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "linear" => Ok(Activation::None),
            "tanh" => Ok(Activation::Tanh),
            other => Err(ModelError::UnknownActivation(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer { inputs, outputs, activation }
    }

    pub fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.outputs
    }
}

/// Layer dimensions plus the derived flat parameter count.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelShape {
    layers: Vec<Layer>,
    total_params: usize,
}

impl ModelShape {
    pub fn new(layers: Vec<Layer>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::NoLayers);
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(ModelError::ZeroDimension { layer: i });
            }
            if i > 0 && layers[i - 1].outputs != layer.inputs {
                return Err(ModelError::LayerChain {
                    layer: i,
                    expected: layer.inputs,
                    got: layers[i - 1].outputs,
                });
            }
        }
        let total_params = layers.iter().map(Layer::param_count).sum();
        Ok(ModelShape { layers, total_params })
    }

    /// `y = W x + b`.
    pub fn linear(inputs: usize, outputs: usize) -> Result<Self, ModelError> {
        Self::new(vec![Layer::new(inputs, outputs, Activation::None)])
    }

    /// `y = W2 tanh(W1 x + b1) + b2`.
    pub fn mlp(inputs: usize, hidden: usize, outputs: usize) -> Result<Self, ModelError> {
        Self::new(vec![
            Layer::new(inputs, hidden, Activation::Tanh),
            Layer::new(hidden, outputs, Activation::None),
        ])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Flat index range covering weights and bias of layer `l`.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let start: usize = self.layers[..l].iter().map(Layer::param_count).sum();
        start..start + self.layers[l].param_count()
    }

    pub fn weight_range(&self, l: usize) -> Range<usize> {
        let r = self.layer_range(l);
        r.start..r.start + self.layers[l].weight_count()
    }

    pub fn bias_range(&self, l: usize) -> Range<usize> {
        let r = self.layer_range(l);
        r.start + self.layers[l].weight_count()..r.end
    }

    /// Seeded uniform(-0.5, 0.5) initialization.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut stream = rng::derive(seed, "init", 0, 0);
        let values = (0..self.total_params)
            .map(|_| rng::uniform(&mut stream, -0.5, 0.5))
            .collect();
        ParamVector { values }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector { values: vec![0.0; self.total_params] }
    }

    /// Split a flat vector into per-layer `[W, b]` tensors.
    pub fn reshape(&self, params: &[f64]) -> Result<Vec<Tensor>, ModelError> {
        self.check_len(params.len())?;
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(Tensor::new(
                layer.outputs,
                layer.inputs,
                params[self.weight_range(l)].to_vec(),
            )?);
            out.push(Tensor::new(1, layer.outputs, params[self.bias_range(l)].to_vec())?);
        }
        Ok(out)
    }

    /// Inverse of [`ModelShape::reshape`]; checks every tensor's dimensions.
    pub fn flatten(&self, tensors: &[Tensor]) -> Result<ParamVector, ModelError> {
        if tensors.len() != self.layers.len() * 2 {
            return Err(ModelError::ShapeMismatch {
                expected: self.layers.len() * 2,
                got: tensors.len(),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = (&tensors[2 * l], &tensors[2 * l + 1]);
            if w.rows != layer.outputs || w.cols != layer.inputs {
                return Err(ModelError::ShapeMismatch {
                    expected: layer.weight_count(),
                    got: w.data.len(),
                });
            }
            if b.data.len() != layer.outputs {
                return Err(ModelError::ShapeMismatch { expected: layer.outputs, got: b.data.len() });
            }
        }
        ParamVector::new(flatten(tensors))
    }

    fn check_len(&self, got: usize) -> Result<(), ModelError> {
        if got != self.total_params {
            return Err(ModelError::ShapeMismatch { expected: self.total_params, got });
        }
        Ok(())
    }
}

/// Row-major matrix; biases are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::ShapeMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, ModelError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(ModelError::ShapeMismatch { expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }
}

/// Concatenate tensors in order, each row-major.
pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
}

/// Flat model parameters; every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        Ok(ParamVector { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn check_shape(&self, shape: &ModelShape) -> Result<(), ModelError> {
        shape.check_len(self.values.len())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// `K` input rows of dimension `d` with `K` continuous target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    target_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if inputs.len() != targets.len() {
            return Err(ModelError::ShapeMismatch { expected: inputs.len(), got: targets.len() });
        }
        let input_dim = inputs[0].len();
        let target_dim = targets[0].len();
        if input_dim == 0 || target_dim == 0 {
            return Err(ModelError::ZeroDimension { layer: 0 });
        }
        let mut flat_x = Vec::with_capacity(inputs.len() * input_dim);
        let mut flat_y = Vec::with_capacity(inputs.len() * target_dim);
        for (row, (x, y)) in inputs.iter().zip(&targets).enumerate() {
            if x.len() != input_dim {
                return Err(ModelError::RaggedDataset { row, expected: input_dim, got: x.len() });
            }
            if y.len() != target_dim {
                return Err(ModelError::RaggedDataset { row, expected: target_dim, got: y.len() });
            }
            flat_x.extend_from_slice(x);
            flat_y.extend_from_slice(y);
        }
        if let Some(index) = flat_x.iter().chain(&flat_y).position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        Ok(Dataset { input_dim, target_dim, inputs: flat_x, targets: flat_y })
    }

    pub fn single(x: &[f64], y: &[f64]) -> Result<Self, ModelError> {
        Self::new(vec![x.to_vec()], vec![y.to_vec()])
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.input_dim..(k + 1) * self.input_dim]
    }

    pub fn target(&self, k: usize) -> &[f64] {
        &self.targets[k * self.target_dim..(k + 1) * self.target_dim]
    }

    fn check_against(&self, shape: &ModelShape) -> Result<(), ModelError> {
        if self.input_dim != shape.input_dim() {
            return Err(ModelError::ShapeMismatch { expected: shape.input_dim(), got: self.input_dim });
        }
        if self.target_dim != shape.output_dim() {
            return Err(ModelError::ShapeMismatch {
                expected: shape.output_dim(),
                got: self.target_dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LossKind {
    /// `sum_j (out_j - y_j)^2` per sample.
    #[default]
    SquaredError,
    /// `-sum_j y_j log softmax(out)_j` per sample; `y` may be any soft label.
    SoftCrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SquaredError => "squared_error",
            LossKind::SoftCrossEntropy => "soft_cross_entropy",
        }
    }
}

impl FromStr for LossKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared_error" => Ok(LossKind::SquaredError),
            "soft_cross_entropy" => Ok(LossKind::SoftCrossEntropy),
            other => Err(ModelError::UnknownLoss(other.to_string())),
        }
    }
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::None => z,
        Activation::Tanh => libm::tanh(z),
    }
}

/// Run the model on one input and return every layer's activation, input
/// first and output last.
fn forward_trace(params: &[f64], shape: &ModelShape, x: &[f64]) -> Vec<Vec<f64>> {
    let mut trace = Vec::with_capacity(shape.layers.len() + 1);
    trace.push(x.to_vec());
    for (l, layer) in shape.layers.iter().enumerate() {
        let w = &params[shape.weight_range(l)];
        let b = &params[shape.bias_range(l)];
        let a = &trace[l];
        let next: Vec<f64> = (0..layer.outputs)
            .map(|j| {
                let row = &w[j * layer.inputs..(j + 1) * layer.inputs];
                let z = row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[j];
                activate(layer.activation, z)
            })
            .collect();
        trace.push(next);
    }
    trace
}

pub fn forward(params: &[f64], shape: &ModelShape, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    shape.check_len(params.len())?;
    if x.len() != shape.input_dim() {
        return Err(ModelError::ShapeMismatch { expected: shape.input_dim(), got: x.len() });
    }
    let mut trace = forward_trace(params, shape, x);
    Ok(trace.pop().unwrap_or_default())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// Loss of one sample, with its gradient *added* into `grad`.
///
/// Dimensions are not re-checked; callers validate once per dataset.
pub fn sample_loss_and_grad(
    params: &[f64],
    shape: &ModelShape,
    x: &[f64],
    y: &[f64],
    loss: LossKind,
    grad: &mut [f64],
) -> f64 {
    let trace = forward_trace(params, shape, x);
    let out = &trace[trace.len() - 1];

    let (value, mut upstream): (f64, Vec<f64>) = match loss {
        LossKind::SquaredError => {
            let diff: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
            (diff.iter().map(|d| d * d).sum(), diff.iter().map(|d| 2.0 * d).collect())
        }
        LossKind::SoftCrossEntropy => {
            let lse = log_sum_exp(out);
            let mass: f64 = y.iter().sum();
            let value = lse * mass - out.iter().zip(y).map(|(o, t)| o * t).sum::<f64>();
            let g = out.iter().zip(y).map(|(o, t)| libm::exp(o - lse) * mass - t).collect();
            (value, g)
        }
    };

    for (l, layer) in shape.layers.iter().enumerate().rev() {
        let a_in = &trace[l];
        let a_out = &trace[l + 1];
        if layer.activation == Activation::Tanh {
            for (u, a) in upstream.iter_mut().zip(a_out) {
                *u *= 1.0 - a * a;
            }
        }
        let w_range = shape.weight_range(l);
        let b_range = shape.bias_range(l);
        {
            let gw = &mut grad[w_range.clone()];
            for (j, delta) in upstream.iter().enumerate() {
                let row = &mut gw[j * layer.inputs..(j + 1) * layer.inputs];
                for (g, a) in row.iter_mut().zip(a_in) {
                    *g += delta * a;
                }
            }
        }
        for (g, delta) in grad[b_range].iter_mut().zip(&upstream) {
            *g += delta;
        }
        if l > 0 {
            let w = &params[w_range];
            let mut down = vec![0.0; layer.inputs];
            for (j, delta) in upstream.iter().enumerate() {
                let row = &w[j * layer.inputs..(j + 1) * layer.inputs];
                for (d, wi) in down.iter_mut().zip(row) {
                    *d += delta * wi;
                }
            }
            upstream = down;
        }
    }
    value
}

/// Mean loss over the dataset and its analytic gradient.
pub fn loss_and_grad(
    params: &[f64],
    shape: &ModelShape,
    data: &Dataset,
    loss: LossKind,
) -> Result<(f64, Vec<f64>), ModelError> {
    shape.check_len(params.len())?;
    data.check_against(shape)?;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for k in 0..data.len() {
        total += sample_loss_and_grad(params, shape, data.input(k), data.target(k), loss, &mut grad);
    }
    let inv = 1.0 / data.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// Full-batch gradient descent. Returns the trained parameters and the loss
/// observed before each step.
pub fn train(
    params: &[f64],
    shape: &ModelShape,
    data: &Dataset,
    loss: LossKind,
    steps: usize,
    lr: f64,
) -> Result<(ParamVector, Vec<f64>), ModelError> {
    let mut w = params.to_vec();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let (value, grad) = loss_and_grad(&w, shape, data, loss)?;
        if !value.is_finite() {
            return Err(ModelError::Diverged { step });
        }
        history.push(value);
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi;
        }
    }
    let w = ParamVector::new(w).map_err(|_| ModelError::Diverged { step: steps })?;
    Ok((w, history))
}
