//! Feature extractor `g` (input → hidden ReLU → features) and linear
//! classifier `h`, with analytic gradients and SGD with momentum.
//!
//! Weight matrices are stored `fan_in × fan_out`, so a layer computes
//! `x · W + b` on row-major batches.

mod checkpoint;
mod loss;

pub use checkpoint::{to_bytes as checkpoint_bytes, classifier_checksum, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{soft_ce_loss, smoothed_ce_loss, LossSpec, SmoothedTarget, LOG_EPS};

use crate::error::{GlcError, Result};
use crate::numeric::{softmax_rows, Matrix, RngState};

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let bias = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        Self {
            weights: Matrix::from_vec(fan_in, fan_out, weights).expect("finite init"),
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weights)?;
        out.add_row_vector(&self.bias)?;
        Ok(out)
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.data().iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.data_mut().iter_mut().chain(self.bias.iter_mut())
    }
}

/// Network shape: input → hidden (ReLU) → features → classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub const DEFAULT_HIDDEN: usize = 64;
    pub const DEFAULT_FEATURE: usize = 32;

    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: Self::DEFAULT_HIDDEN,
            feature_dim: Self::DEFAULT_FEATURE,
            num_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(GlcError::InvalidArgument(format!(
                "all layer widths must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hidden: Layer,
    pub feature: Layer,
    pub classifier: Layer,
}

/// Which parameter blocks receive gradients and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Classifier frozen; used throughout target adaptation.
    FeatureOnly,
}

impl ModelParams {
    pub fn init(arch: Architecture, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            hidden: Layer::init(arch.input_dim, arch.hidden_dim, rng),
            feature: Layer::init(arch.hidden_dim, arch.feature_dim, rng),
            classifier: Layer::init(arch.feature_dim, arch.num_classes, rng),
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            hidden: Layer::zeros(arch.input_dim, arch.hidden_dim),
            feature: Layer::zeros(arch.hidden_dim, arch.feature_dim),
            classifier: Layer::zeros(arch.feature_dim, arch.num_classes),
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.hidden.fan_in(),
            hidden_dim: self.hidden.fan_out(),
            feature_dim: self.feature.fan_out(),
            num_classes: self.classifier.fan_out(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    pub fn layers(&self) -> [&Layer; 3] {
        [&self.hidden, &self.feature, &self.classifier]
    }

    fn layers_mut(&mut self) -> [&mut Layer; 3] {
        [&mut self.hidden, &mut self.feature, &mut self.classifier]
    }

    /// Checks chained shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.hidden.fan_out() != self.feature.fan_in()
            || self.feature.fan_out() != self.classifier.fan_in()
        {
            return Err(GlcError::Shape("layer widths do not chain".into()));
        }
        for layer in self.layers() {
            if layer.bias.len() != layer.fan_out() {
                return Err(GlcError::Shape("bias length differs from layer width".into()));
            }
            if layer.values().any(|v| !v.is_finite()) {
                return Err(GlcError::NonFinite("model parameter".into()));
            }
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let a = self.architecture();
        Self::zeros(a).expect("shape of an existing model")
    }

    /// Flattened parameters (hidden, feature, classifier; weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers().iter().flat_map(|l| l.values().copied()).collect()
    }
}

/// Outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
}

pub fn forward(params: &ModelParams, batch: &Matrix) -> Result<Forward> {
    if batch.cols() != params.hidden.fan_in() {
        return Err(GlcError::Shape(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            params.hidden.fan_in()
        )));
    }
    let hidden_pre = params.hidden.apply(batch)?;
    let mut hidden = hidden_pre.clone();
    hidden.map_inplace(|v| v.max(0.0));
    let features = params.feature.apply(&hidden)?;
    let logits = params.classifier.apply(&features)?;
    let probs = softmax_rows(&logits)?;
    Ok(Forward {
        features,
        logits,
        probs,
        hidden_pre,
        hidden,
    })
}

/// Gradients with the same block layout as [`ModelParams`].
pub type Gradients = ModelParams;

/// Analytic gradients of `loss` at `params` on `batch`. Frozen blocks get
/// exact zeros.
pub fn backward(
    params: &ModelParams,
    batch: &Matrix,
    loss: &LossSpec<'_>,
    trainable: Trainable,
) -> Result<(f64, Gradients)> {
    let fwd = forward(params, batch)?;
    backward_from(params, batch, &fwd, loss, trainable)
}

/// Same as [`backward`] but reuses an existing forward pass of `batch`.
pub fn backward_from(
    params: &ModelParams,
    batch: &Matrix,
    fwd: &Forward,
    loss: &LossSpec<'_>,
    trainable: Trainable,
) -> Result<(f64, Gradients)> {
    let value = loss.value(&fwd.probs)?;
    let d_logits = loss.logit_gradient(&fwd.probs)?;
    let mut grads = params.zeros_like();

    if trainable == Trainable::All {
        grads.classifier.weights = fwd.features.t_matmul(&d_logits)?;
        grads.classifier.bias = d_logits.column_sums();
    }
    let d_features = d_logits.matmul_t(&params.classifier.weights)?;

    grads.feature.weights = fwd.hidden.t_matmul(&d_features)?;
    grads.feature.bias = d_features.column_sums();
    let mut d_hidden = d_features.matmul_t(&params.feature.weights)?;
    for (d, &pre) in d_hidden.data_mut().iter_mut().zip(fwd.hidden_pre.data()) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }

    grads.hidden.weights = batch.t_matmul(&d_hidden)?;
    grads.hidden.bias = d_hidden.column_sums();
    Ok((value, grads))
}

/// Momentum buffers plus step hyper-parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(GlcError::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(GlcError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: params.zeros_like(),
        })
    }
}

/// `v ← m·v + g; p ← p − lr·v` on trainable blocks. Frozen blocks and their
/// buffers are left untouched.
pub fn sgd_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &Gradients,
    trainable: Trainable,
) -> Result<()> {
    if params.architecture() != grads.architecture() || params.architecture() != state.velocity.architecture() {
        return Err(GlcError::Shape("gradient/parameter/buffer shapes differ".into()));
    }
    let n_blocks = match trainable {
        Trainable::All => 3,
        Trainable::FeatureOnly => 2,
    };
    if grads.layers()[..n_blocks]
        .iter()
        .any(|l| l.values().any(|v| !v.is_finite()))
    {
        return Err(GlcError::NonFinite("gradient".into()));
    }
    let (lr, m) = (state.lr, state.momentum);
    let grad_layers = grads.layers();
    for ((p, v), g) in params
        .layers_mut()
        .into_iter()
        .zip(state.velocity.layers_mut())
        .zip(grad_layers)
        .take(n_blocks)
    {
        for ((p, v), g) in p.values_mut().zip(v.values_mut()).zip(g.values()) {
            *v = m * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}
