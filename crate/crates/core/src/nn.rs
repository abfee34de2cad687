//! Dense feed-forward networks with explicit backpropagation, Adam, inverted
//! dropout and a gradient-reversal helper.
//!
//! Batches are row-major: an input batch is a `batch x inputs` matrix and a
//! layer's weight matrix is `outputs x inputs`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgctError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `outputs x inputs`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Execution mode of a forward pass. Dropout is only active in training.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "NetDoc", try_from = "NetDoc")]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Bumped on every parameter update so stale caches are detected.
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.dropout_rate == other.dropout_rate
            && self.seed == other.seed
    }
}

/// Values recorded by [`DenseNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
    masks: Vec<Option<DMatrix<f64>>>,
}

/// Gradients (or any per-parameter quantity) with the shape of a net.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl DenseGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        DMatrix::zeros(l.outputs(), l.inputs()),
                        DVector::zeros(l.outputs()),
                    )
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale(factor);
        self
    }

    pub fn add_assign(&mut self, other: &DenseGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }
}

impl DenseNet {
    /// Builds a net with ReLU hidden layers and a linear output layer,
    /// Glorot-uniform weights and zero biases.
    pub fn mlp(dims: &[usize], dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::mlp_with_rng(dims, dropout_rate, seed, &mut rng)
    }

    /// Like [`mlp`](Self::mlp) but draws weights from a caller-owned stream,
    /// so several nets can share one seed deterministically.
    pub fn mlp_with_rng(
        dims: &[usize],
        dropout_rate: f64,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(CgctError::InvalidArgument(format!(
                "invalid layer dims {dims:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(CgctError::InvalidArgument(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit));
                DenseLayer {
                    weights,
                    bias: DVector::zeros(fan_out),
                    activation: if i == last {
                        Activation::Linear
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Self {
            layers,
            dropout_rate,
            seed,
            generation: 0,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(CgctError::InvalidArgument("net needs a layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(CgctError::DimensionMismatch {
                    expected: pair[0].outputs(),
                    got: pair[1].inputs(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(CgctError::DimensionMismatch {
                    expected: l.outputs(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self {
            layers,
            dropout_rate,
            seed: 0,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &DMatrix<f64>, mode: Mode<'_>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(CgctError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut rng = match mode {
            Mode::Train(rng) if self.dropout_rate > 0.0 => Some(rng),
            _ => None,
        };
        let keep = 1.0 - self.dropout_rate;
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            generation: self.generation,
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = &h * layer.weights.transpose();
            for mut row in pre.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let mut out = pre.map(|v| layer.activation.apply(v));
            let mask = match (&mut rng, i < last) {
                (Some(rng), true) => {
                    let m = DMatrix::from_fn(out.nrows(), out.ncols(), |_, _| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    out.component_mul_assign(&m);
                    Some(m)
                }
                _ => None,
            };
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre_activations.push(pre);
            cache.masks.push(mask);
        }
        Ok((h, cache))
    }

    /// Inference-mode forward pass of a single row.
    pub fn predict_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        let (out, _) = self.forward(&m, Mode::Inference)?;
        Ok(out.iter().copied().collect())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x, Mode::Inference)?.0)
    }

    /// Backpropagates `upstream = dLoss/dOutput` (batch x outputs).
    ///
    /// Returns parameter gradients and `dLoss/dInput`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(DenseGrads, DMatrix<f64>)> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(CgctError::InvalidArgument(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        let batch = cache.inputs[0].nrows();
        if upstream.nrows() != batch || upstream.ncols() != self.output_dim() {
            return Err(CgctError::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.ncols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &cache.masks[i] {
                g.component_mul_assign(mask);
            }
            let pre = &cache.pre_activations[i];
            let delta = g.zip_map(pre, |u, p| u * layer.activation.derivative(p));
            let grad_w = delta.transpose() * &cache.inputs[i];
            let grad_b = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            g = &delta * &layer.weights;
            grads.push((grad_w, grad_b));
        }
        grads.reverse();
        Ok((DenseGrads { layers: grads }, g))
    }

    /// Applies `param -= delta` layer by layer.
    pub fn apply_delta(&mut self, delta: &DenseGrads) {
        for (layer, (dw, db)) in self.layers.iter_mut().zip(&delta.layers) {
            layer.weights -= dw;
            layer.bias -= db;
        }
        self.generation += 1;
    }

    /// Flat view of all parameters (weights column-major, then bias, per layer).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    /// Overwrites parameters from the layout of [`flat_params`](Self::flat_params).
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(CgctError::DimensionMismatch {
                expected: self.parameter_count(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
        self.generation += 1;
        Ok(())
    }
}

/// Gradient reversal: the encoder receives `-theta * grad` from the
/// adversarial head.
pub fn grl_scale(grad: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    grad * (-theta)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: DenseGrads,
    second: DenseGrads,
}

impl AdamState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: DenseGrads::zeros_like(net),
            second: DenseGrads::zeros_like(net),
        }
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients.
    pub fn step(&mut self, net: &mut DenseNet, grads: &DenseGrads) -> Result<()> {
        if grads.layers.len() != self.first.layers.len() {
            return Err(CgctError::DimensionMismatch {
                expected: self.first.layers.len(),
                got: grads.layers.len(),
            });
        }
        for ((w, b), (mw, mb)) in grads.layers.iter().zip(&self.first.layers) {
            if w.shape() != mw.shape() || b.len() != mb.len() {
                return Err(CgctError::DimensionMismatch {
                    expected: mw.len() + mb.len(),
                    got: w.len() + b.len(),
                });
            }
        }
        if !grads.is_finite() {
            return Err(CgctError::NonFinite("gradient passed to Adam".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let mut delta = DenseGrads::zeros_like(net);
        for (l, (gw, gb)) in grads.layers.iter().enumerate() {
            let update = |g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                lr * (*m / c1) / ((*v / c2).sqrt() + eps)
            };
            let (mw, mb) = &mut self.first.layers[l];
            let (vw, vb) = &mut self.second.layers[l];
            let (dw, db) = &mut delta.layers[l];
            for (((g, m), v), d) in gw.iter().zip(mw.iter_mut()).zip(vw.iter_mut()).zip(dw.iter_mut()) {
                *d = update(*g, m, v);
            }
            for (((g, m), v), d) in gb.iter().zip(mb.iter_mut()).zip(vb.iter_mut()).zip(db.iter_mut()) {
                *d = update(*g, m, v);
            }
        }
        net.apply_delta(&delta);
        Ok(())
    }
}

/// Update rule for a single net. Plain SGD exists so tests can hand-unroll
/// training steps exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &DenseNet, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(net, learning_rate)),
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &DenseGrads) -> Result<()> {
        match self {
            Optimizer::Adam(state) => state.step(net, grads),
            Optimizer::Sgd { learning_rate } => {
                if !grads.is_finite() {
                    return Err(CgctError::NonFinite("gradient passed to SGD".into()));
                }
                net.apply_delta(&grads.clone().scaled(*learning_rate));
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Shuffled mini-batch index lists covering `0..n` once.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Rows of `m` at `idx`, in order.
pub fn gather_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetDoc {
    dropout_rate: f64,
    seed: u64,
    layers: Vec<LayerDoc>,
}

impl From<DenseNet> for NetDoc {
    fn from(net: DenseNet) -> Self {
        NetDoc {
            dropout_rate: net.dropout_rate,
            seed: net.seed,
            layers: net
                .layers
                .into_iter()
                .map(|l| LayerDoc {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.transpose().iter().copied().collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetDoc> for DenseNet {
    type Error = CgctError;

    fn try_from(doc: NetDoc) -> Result<Self> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                    return Err(CgctError::Corrupt(format!(
                        "layer {}x{} has {} weights and {} biases",
                        l.outputs,
                        l.inputs,
                        l.weights.len(),
                        l.bias.len()
                    )));
                }
                Ok(DenseLayer {
                    weights: DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights),
                    bias: DVector::from_vec(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = DenseNet::from_layers(layers, doc.dropout_rate)?;
        net.seed = doc.seed;
        Ok(net)
    }
}
