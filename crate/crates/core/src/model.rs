//! Fully-connected network whose forward and backward passes capture the
//! per-layer statistics K-FAC consumes: layer inputs `a_{i-1}` and
//! pre-activation gradients `g_i`.
//!
//! Batches are column-major in the sample index: `inputs` is `d_0 × B`.
//! Per-sample losses are `logsumexp(s) − s_y` for cross-entropy and
//! `½‖s − t‖²` for squared error; the training loss is their mean.
//!
//! Captured pre-activation gradients are per-sample: column `n` holds
//! `∂ℓ_n/∂s_i`, so `G = (1/B) Σ g gᵀ` and `∇L_i = (1/B) Σ g aᵀ`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    /// A constant 1 is appended to every layer input; the last weight column
    /// acts as the bias.
    Homogeneous,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Argument(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

named_enum!(Activation, "activation",
    "relu" => Activation::Relu,
    "tanh" => Activation::Tanh,
    "identity" => Activation::Identity,
);
named_enum!(LossKind, "loss",
    "softmax_cross_entropy" => LossKind::SoftmaxCrossEntropy,
    "mean_squared_error" => LossKind::MeanSquaredError,
);
named_enum!(BiasMode, "bias mode",
    "none" => BiasMode::None,
    "homogeneous" => BiasMode::Homogeneous,
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[d_0, d_1, …, d_L]`.
    pub layer_dims: Vec<usize>,
    /// Applied to every hidden layer; the output layer is linear.
    pub activation: Activation,
    pub loss: LossKind,
    pub bias: BiasMode,
}

impl NetworkSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, loss: LossKind) -> Self {
        Self {
            layer_dims,
            activation,
            loss,
            bias: BiasMode::None,
        }
    }

    pub fn with_bias(mut self, bias: BiasMode) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Argument(
                "network needs at least one layer (two dimensions)".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Argument("layer dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Weight shape `(d_out, d_in)` of layer `i` (0-based), bias column included.
    pub fn weight_shape(&self, i: usize) -> (usize, usize) {
        let extra = usize::from(self.bias == BiasMode::Homogeneous);
        (self.layer_dims[i + 1], self.layer_dims[i] + extra)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// Class indices for cross-entropy.
    Classes(Vec<usize>),
    /// `d_L × B` regression targets for squared error.
    Values(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        let b = inputs.cols();
        if b == 0 {
            return Err(Error::Argument("batch must hold at least one sample".into()));
        }
        let n_targets = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.cols(),
        };
        if n_targets != b {
            return Err(Error::shape(
                "Batch::new",
                format!("{b} inputs but {n_targets} targets"),
            ));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let inputs = Matrix::from_fn(self.inputs.rows(), indices.len(), |i, j| {
            self.inputs[(i, indices[j])]
        });
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&k| c[k]).collect()),
            Targets::Values(m) => {
                Targets::Values(Matrix::from_fn(m.rows(), indices.len(), |i, j| {
                    m[(i, indices[j])]
                }))
            }
        };
        Batch { inputs, targets }
    }

    /// Contiguous samples `[start, start + count)`.
    pub fn slice(&self, start: usize, count: usize) -> Batch {
        let idx: Vec<usize> = (start..start + count).collect();
        self.select(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub weights: Matrix,
    /// `d_in × B` layer inputs from the latest forward pass.
    pub captured_input: Option<Matrix>,
    /// `d_out × B` per-sample pre-activation gradients from the latest backward pass.
    pub captured_preact_grad: Option<Matrix>,
    #[serde(skip)]
    preact: Option<Matrix>,
}

impl LayerState {
    fn new(weights: Matrix) -> Self {
        Self {
            weights,
            captured_input: None,
            captured_preact_grad: None,
            preact: None,
        }
    }

    fn clear_captures(&mut self) {
        self.captured_input = None;
        self.captured_preact_grad = None;
        self.preact = None;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerState>,
}

impl Network {
    /// Weights uniform on `±√(6/(d_in + d_out))` (bias columns start at zero),
    /// drawn layer by layer in row-major order from a ChaCha8 stream seeded
    /// with `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..spec.num_layers())
            .map(|i| {
                let (d_out, cols) = spec.weight_shape(i);
                let d_in = spec.layer_dims[i];
                let limit = (6.0 / (d_in + d_out) as f64).sqrt();
                let w = Matrix::from_fn(d_out, cols, |_, j| {
                    if j < d_in {
                        rng.gen_range(-limit..=limit)
                    } else {
                        0.0
                    }
                });
                LayerState::new(w)
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Builds a network around explicit weights.
    pub fn from_weights(spec: NetworkSpec, weights: Vec<Matrix>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.num_layers() {
            return Err(Error::shape(
                "Network::from_weights",
                format!("{} weight matrices for {} layers", weights.len(), spec.num_layers()),
            ));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.shape() != spec.weight_shape(i) {
                return Err(Error::shape(
                    "Network::from_weights",
                    format!("layer {i}: {:?} expected {:?}", w.shape(), spec.weight_shape(i)),
                ));
            }
        }
        Ok(Self {
            spec,
            layers: weights.into_iter().map(LayerState::new).collect(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.weights.clone()).collect()
    }

    pub fn set_weights(&mut self, weights: &[Matrix]) -> Result<()> {
        for (layer, w) in self.layers.iter_mut().zip(weights) {
            layer.weights.check_same_shape(w, "set_weights")?;
            layer.weights = w.clone();
        }
        Ok(())
    }

    /// Forward pass capturing each layer's input. Returns the mean loss.
    pub fn forward(&mut self, batch: &Batch) -> Result<f64> {
        let (captures, output) = self.run_forward(batch)?;
        for (layer, (input, preact)) in self.layers.iter_mut().zip(captures) {
            layer.captured_input = Some(input);
            layer.preact = Some(preact);
            layer.captured_preact_grad = None;
        }
        mean_loss(self.spec.loss, &output, &batch.targets)
    }

    /// Mean loss without touching captured state.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let (_, output) = self.run_forward(batch)?;
        mean_loss(self.spec.loss, &output, &batch.targets)
    }

    /// Network outputs (`d_L × B`) without touching captured state.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut a = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let s = matmul(&layer.weights, &self.augment(&a))?;
            a = if i + 1 < self.layers.len() {
                s.map(|x| self.spec.activation.apply(x))
            } else {
                s
            };
        }
        Ok(a)
    }

    /// Fraction of samples whose arg-max output matches the class target.
    /// `None` for regression targets.
    pub fn accuracy(&self, batch: &Batch) -> Result<Option<f64>> {
        let Targets::Classes(classes) = &batch.targets else {
            return Ok(None);
        };
        let out = self.predict(&batch.inputs)?;
        let hits = classes
            .iter()
            .enumerate()
            .filter(|&(n, &c)| argmax_column(&out, n) == c)
            .count();
        Ok(Some(hits as f64 / classes.len() as f64))
    }

    fn augment(&self, a: &Matrix) -> Matrix {
        match self.spec.bias {
            BiasMode::None => a.clone(),
            BiasMode::Homogeneous => {
                let ones = Matrix::from_fn(1, a.cols(), |_, _| 1.0);
                let mut data = a.as_slice().to_vec();
                data.extend_from_slice(ones.as_slice());
                Matrix::from_vec(a.rows() + 1, a.cols(), data).expect("sizes agree")
            }
        }
    }

    fn run_forward(&self, batch: &Batch) -> Result<(Vec<(Matrix, Matrix)>, Matrix)> {
        let d0 = self.spec.layer_dims[0];
        if batch.inputs.rows() != d0 {
            return Err(Error::shape(
                "forward",
                format!("batch input dimension {} but network expects {d0}", batch.inputs.rows()),
            ));
        }
        self.check_targets(batch)?;
        let mut captures = Vec::with_capacity(self.layers.len());
        let mut a = batch.inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = self.augment(&a);
            let s = matmul(&layer.weights, &input)?;
            a = if i + 1 < self.layers.len() {
                s.map(|x| self.spec.activation.apply(x))
            } else {
                s.clone()
            };
            captures.push((input, s));
        }
        Ok((captures, a))
    }

    fn check_targets(&self, batch: &Batch) -> Result<()> {
        let d_out = *self.spec.layer_dims.last().expect("validated");
        match (&batch.targets, self.spec.loss) {
            (Targets::Classes(c), LossKind::SoftmaxCrossEntropy) => {
                if let Some(&bad) = c.iter().find(|&&k| k >= d_out) {
                    return Err(Error::Argument(format!(
                        "class index {bad} out of range for {d_out} outputs"
                    )));
                }
                Ok(())
            }
            (Targets::Values(m), LossKind::MeanSquaredError) => {
                if m.rows() != d_out {
                    return Err(Error::shape(
                        "forward",
                        format!("targets have {} rows, network outputs {d_out}", m.rows()),
                    ));
                }
                Ok(())
            }
            _ => Err(Error::Argument(
                "target kind does not match the network's loss".into(),
            )),
        }
    }

    /// Gradients of the mean loss for every layer, using the state captured
    /// by the preceding [`Network::forward`] on the same batch. Also stores
    /// the per-sample pre-activation gradients in each layer.
    pub fn backward(&mut self, batch: &Batch) -> Result<Vec<Matrix>> {
        let b = batch.len();
        let last = self.layers.len() - 1;
        let output = match (&self.layers[last].preact, &self.layers[last].captured_input) {
            (Some(s), Some(input)) if s.cols() == b && input.cols() == b => s.clone(),
            _ => {
                return Err(Error::Ordering(
                    "backward called without a matching forward pass".into(),
                ))
            }
        };
        let mut g = output_grad(self.spec.loss, &output, &batch.targets)?;
        let inv_b = 1.0 / b as f64;
        let mut grads = vec![Matrix::zeros(0, 0); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let input = self.layers[i]
                .captured_input
                .as_ref()
                .ok_or_else(|| Error::Ordering(format!("layer {i} has no captured input")))?;
            grads[i] = matmul_nt(&g, input)?.scale(inv_b);
            if i > 0 {
                let d_prev = self.spec.layer_dims[i];
                let back = matmul_tn(&self.layers[i].weights, &g)?;
                let prev_s = self.layers[i - 1]
                    .preact
                    .as_ref()
                    .ok_or_else(|| Error::Ordering(format!("layer {} has no captured preactivation", i - 1)))?;
                let act = self.spec.activation;
                let next = Matrix::from_fn(d_prev, b, |r, c| back[(r, c)] * act.derivative(prev_s[(r, c)]));
                self.layers[i].captured_preact_grad = Some(g);
                g = next;
            } else {
                self.layers[i].captured_preact_grad = Some(g.clone());
            }
        }
        Ok(grads)
    }

    /// Central-difference estimate of `∂(mean loss)/∂W` for every weight.
    pub fn finite_diff_grad(&self, batch: &Batch, h: f64) -> Result<Vec<Matrix>> {
        if !(h > 0.0) {
            return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
        }
        let mut probe = self.clone();
        for layer in &mut probe.layers {
            layer.clear_captures();
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (rows, cols) = self.layers[i].weights.shape();
            let mut g = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let orig = probe.layers[i].weights[(r, c)];
                    probe.layers[i].weights[(r, c)] = orig + h;
                    let up = probe.loss(batch)?;
                    probe.layers[i].weights[(r, c)] = orig - h;
                    let down = probe.loss(batch)?;
                    probe.layers[i].weights[(r, c)] = orig;
                    g[(r, c)] = (up - down) / (2.0 * h);
                }
            }
            grads.push(g);
        }
        Ok(grads)
    }
}

fn argmax_column(m: &Matrix, col: usize) -> usize {
    (0..m.rows())
        .max_by(|&a, &b| m[(a, col)].total_cmp(&m[(b, col)]).then(b.cmp(&a)))
        .unwrap_or(0)
}

fn log_sum_exp_column(m: &Matrix, col: usize) -> f64 {
    let max = (0..m.rows()).map(|r| m[(r, col)]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..m.rows()).map(|r| (m[(r, col)] - max).exp()).sum();
    max + sum.ln()
}

fn mean_loss(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<f64> {
    let b = output.cols();
    let total: f64 = match (kind, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(classes)) => classes
            .iter()
            .enumerate()
            .map(|(n, &c)| log_sum_exp_column(output, n) - output[(c, n)])
            .sum(),
        (LossKind::MeanSquaredError, Targets::Values(t)) => (0..b)
            .map(|n| {
                0.5 * (0..output.rows())
                    .map(|r| (output[(r, n)] - t[(r, n)]).powi(2))
                    .sum::<f64>()
            })
            .sum(),
        _ => {
            return Err(Error::Argument(
                "target kind does not match the network's loss".into(),
            ))
        }
    };
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss is not finite ({loss})")));
    }
    Ok(loss)
}

/// Per-sample `∂ℓ_n/∂s_L`: `softmax(s) − onehot(y)` or `s − t`.
fn output_grad(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<Matrix> {
    match (kind, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(classes)) => {
            let mut g = Matrix::zeros(output.rows(), output.cols());
            for (n, &c) in classes.iter().enumerate() {
                let lse = log_sum_exp_column(output, n);
                for r in 0..output.rows() {
                    g[(r, n)] = (output[(r, n)] - lse).exp();
                }
                g[(c, n)] -= 1.0;
            }
            Ok(g)
        }
        (LossKind::MeanSquaredError, Targets::Values(t)) => output.sub(t),
        _ => Err(Error::Argument(
            "target kind does not match the network's loss".into(),
        )),
    }
}

/// Heavy-ball momentum buffers, one per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub buffers: Vec<Matrix>,
}

impl MomentumState {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            buffers: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
        }
    }
}

/// `m ← μ·m + g; W ← W − lr·m` for every layer.
pub fn sgd_step(
    net: &mut Network,
    grads: &[Matrix],
    lr: f64,
    momentum: &mut MomentumState,
    mu: f64,
) -> Result<()> {
    if grads.len() != net.layers.len() || momentum.buffers.len() != net.layers.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} gradients and {} momentum buffers for {} layers",
                grads.len(),
                momentum.buffers.len(),
                net.layers.len()
            ),
        ));
    }
    for ((layer, g), m) in net.layers.iter_mut().zip(grads).zip(&mut momentum.buffers) {
        layer.weights.check_same_shape(g, "sgd_step")?;
        m.check_same_shape(g, "sgd_step")?;
        for (mv, &gv) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *mv = mu * *mv + gv;
        }
        for (w, &mv) in layer.weights.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *w -= lr * mv;
        }
    }
    Ok(())
}
