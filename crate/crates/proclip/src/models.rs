//! Toy trainable encoders: the 4-layer MLP projector, frozen teacher
//! stand-ins, and the EMA shadow encoder.
//!
//! Forward passes cache pre-activations so `backward` can produce exact
//! analytic gradients for every layer plus the input, which chains losses
//! into upstream encoders. Parameters are plain `f64` tensors; the optimizer
//! sees them through [`MlpProjector::param_slices_mut`] in a fixed order
//! (layer 0 weight, layer 0 bias, layer 1 weight, ...).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

/// The projector stacks exactly this many linear layers.
pub const PROJECTOR_DEPTH: usize = 4;

/// Elementwise nonlinearity applied between layers (never after the last).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// GELU approximated as `x * sigmoid(1.702 x)`.
    Gelu,
    /// Pass-through, for degenerate-configuration tests.
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => x * sigmoid(1.702 * x),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let s = sigmoid(1.702 * x);
                s + x * 1.702 * s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// A dense affine map: `y = x W^t + b` with `W` of shape `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: EmbeddingBatch,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: EmbeddingBatch, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::ShapeMismatch {
                context: "LinearLayer::new",
                expected: format!("bias of length {}", weight.rows()),
                got: format!("length {}", bias.len()),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: EmbeddingBatch::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Square identity layer with zero bias, used in degenerate tests.
    pub fn identity(dim: usize) -> Self {
        let mut weight = EmbeddingBatch::zeros(dim, dim);
        for i in 0..dim {
            weight.set(i, i, 1.0);
        }
        Self {
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Glorot-uniform weights in `[-sqrt(6/(fan_in+fan_out)), +...]`,
    /// zero bias, drawn row-major from `rng`.
    pub fn glorot_uniform(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut weight = EmbeddingBatch::zeros(out_dim, in_dim);
        for v in weight.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Self {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                context: "LinearLayer::forward",
                expected: format!("{} input columns", self.in_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let mut out = EmbeddingBatch::zeros(x.rows(), self.out_dim());
        for b in 0..x.rows() {
            let xr = x.row(b);
            for o in 0..self.out_dim() {
                out.set(b, o, crate::embedding::dot(self.weight.row(o), xr) + self.bias[o]);
            }
        }
        Ok(out)
    }
}

/// Activations recorded during a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs: `inputs[l]` feeds layer `l`; `inputs[0]` is the batch.
    inputs: Vec<EmbeddingBatch>,
    /// Pre-activation outputs of layers `0..depth-1`.
    pre_acts: Vec<EmbeddingBatch>,
}

/// Per-layer parameter gradients in layer order.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: EmbeddingBatch,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    /// Flattened gradient slices in the same order as
    /// [`MlpProjector::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn zeros_like(model: &MlpProjector) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: EmbeddingBatch::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }
}

/// A stack of exactly four linear layers with an activation between
/// consecutive layers (not after the last). Serves both as the text-side
/// projector and, wrapped in [`ToyEncoder`], as every toy encoder tower.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpProjector {
    layers: Vec<LinearLayer>,
    activation: Activation,
}

impl MlpProjector {
    pub fn new(layers: Vec<LinearLayer>, activation: Activation) -> Result<Self> {
        if layers.len() != PROJECTOR_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "projector must have exactly {PROJECTOR_DEPTH} layers, got {}",
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    context: "MlpProjector::new",
                    expected: format!("layer input of {}", w[0].out_dim()),
                    got: format!("{}", w[1].in_dim()),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    /// Deterministic Glorot initialization of an
    /// `in_dim -> hidden -> hidden -> hidden -> out_dim` stack.
    pub fn init(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [in_dim, hidden_dim, hidden_dim, hidden_dim, out_dim];
        let layers = dims
            .windows(2)
            .map(|d| LinearLayer::glorot_uniform(d[1], d[0], &mut rng))
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[PROJECTOR_DEPTH - 1].out_dim()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    /// Forward pass returning the output and the cache `backward` needs.
    pub fn forward(&self, x: &EmbeddingBatch) -> Result<(EmbeddingBatch, ForwardCache)> {
        let mut inputs = Vec::with_capacity(PROJECTOR_DEPTH);
        let mut pre_acts = Vec::with_capacity(PROJECTOR_DEPTH - 1);
        let mut current = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(current.clone());
            let z = layer.forward(&current)?;
            if l + 1 < PROJECTOR_DEPTH {
                pre_acts.push(z.clone());
                let mut a = z;
                for v in a.data_mut() {
                    *v = self.activation.apply(*v);
                }
                current = a;
            } else {
                current = z;
            }
        }
        Ok((current, ForwardCache { inputs, pre_acts }))
    }

    /// Forward pass without caching, for frozen encoders and evaluation.
    pub fn apply(&self, x: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        Ok(self.forward(x)?.0)
    }

    /// Backpropagates `upstream` (the loss gradient at the output) through
    /// the cached forward pass. Returns parameter gradients and the gradient
    /// at the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &EmbeddingBatch,
    ) -> Result<(MlpGrads, EmbeddingBatch)> {
        let batch = cache.inputs[0].rows();
        if upstream.rows() != batch || upstream.cols() != self.out_dim() {
            return Err(Error::ShapeMismatch {
                context: "MlpProjector::backward",
                expected: format!("{batch}x{}", self.out_dim()),
                got: format!("{}x{}", upstream.rows(), upstream.cols()),
            });
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = upstream.clone(); // gradient at the current layer's output
        for l in (0..PROJECTOR_DEPTH).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let lg = &mut grads.layers[l];
            // dW[o][i] = sum_b g[b][o] * input[b][i]; db[o] = sum_b g[b][o]
            for b in 0..batch {
                let gr = g.row(b);
                let xr = input.row(b);
                for o in 0..layer.out_dim() {
                    lg.bias[o] += gr[o];
                    let wrow = lg.weight.row_mut(o);
                    for i in 0..layer.in_dim() {
                        wrow[i] += gr[o] * xr[i];
                    }
                }
            }
            // Gradient at the layer input: g W.
            let mut gi = EmbeddingBatch::zeros(batch, layer.in_dim());
            for b in 0..batch {
                let gr = g.row(b);
                for o in 0..layer.out_dim() {
                    let go = gr[o];
                    if go != 0.0 {
                        let wrow = layer.weight.row(o);
                        let gir = gi.row_mut(b);
                        for i in 0..layer.in_dim() {
                            gir[i] += go * wrow[i];
                        }
                    }
                }
            }
            if l > 0 {
                // Chain through the activation applied after layer l-1.
                let z = &cache.pre_acts[l - 1];
                for (gv, zv) in gi.data_mut().iter_mut().zip(z.data()) {
                    *gv *= self.activation.derivative(*zv);
                }
            }
            g = gi;
        }
        Ok((grads, g))
    }

    /// Parameter tensors in optimizer order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(PROJECTOR_DEPTH * 2);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(PROJECTOR_DEPTH * 2);
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

/// A toy encoder tower: an MLP plus a label for the input space it reads.
/// Frozen encoders never receive gradient updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub net: MlpProjector,
    pub input_space: String,
    pub frozen: bool,
}

impl ToyEncoder {
    pub fn new(net: MlpProjector, input_space: impl Into<String>) -> Self {
        Self {
            net,
            input_space: input_space.into(),
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn apply(&self, x: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        self.net.apply(x)
    }
}

/// Frozen-weight shadow of an encoder, updated as
/// `p* <- alpha p* + (1 - alpha) p` after each optimizer step.
#[derive(Debug, Clone)]
pub struct EmaTeacher {
    shadow: MlpProjector,
    alpha: f64,
}

impl EmaTeacher {
    /// Starts the shadow as an exact copy of the student, so the
    /// regularizer is exactly zero at the first step.
    pub fn new(student: &MlpProjector, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "ema alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            shadow: student.clone(),
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shadow(&self) -> &MlpProjector {
        &self.shadow
    }

    pub fn apply(&self, x: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        self.shadow.apply(x)
    }

    /// One EMA step over every parameter, elementwise.
    pub fn update(&mut self, student: &MlpProjector) -> Result<()> {
        let student_params = student.param_slices();
        let mut shadow_params = self.shadow.param_slices_mut();
        if student_params.len() != shadow_params.len()
            || student_params
                .iter()
                .zip(&shadow_params)
                .any(|(s, t)| s.len() != t.len())
        {
            return Err(Error::ShapeMismatch {
                context: "EmaTeacher::update",
                expected: "shadow shapes matching student".into(),
                got: "mismatched parameter tensors".into(),
            });
        }
        for (shadow, student) in shadow_params.iter_mut().zip(&student_params) {
            for (p_star, p) in shadow.iter_mut().zip(*student) {
                *p_star = self.alpha * *p_star + (1.0 - self.alpha) * *p;
            }
        }
        Ok(())
    }
}
