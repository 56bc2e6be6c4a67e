//! Small softmax classifiers with hand-written gradients.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::pseudo_label::{ProbabilityVector, PseudoLabel};
use crate::error::{AlimError, Result};
use crate::scalar::Real;

/// Probabilities are floored here before taking logs.
pub const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    /// Softmax regression.
    Linear,
    /// One rectifier hidden layer.
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Mlp { hidden: 0 } => Err(AlimError::invalid("hidden layer width must be positive")),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Linear => write!(f, "linear"),
            Self::Mlp { hidden } => write!(f, "mlp:{hidden}"),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = AlimError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("linear") {
            return Ok(Self::Linear);
        }
        if let Some(h) = s.strip_prefix("mlp:") {
            let hidden = h
                .parse()
                .map_err(|_| AlimError::invalid(format!("cannot parse hidden width in {s:?}")))?;
            let arch = Self::Mlp { hidden };
            arch.validate()?;
            return Ok(arch);
        }
        Err(AlimError::invalid(format!(
            "architecture must be `linear` or `mlp:<hidden>`, got {s:?}"
        )))
    }
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn affine(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
            .collect()
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.inputs == other.inputs && self.outputs == other.outputs
    }
}

/// Classifier parameters `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    architecture: Architecture,
    layers: Vec<Dense<T>>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = ModelParams<T>;

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    hidden: Option<Vec<T>>,
    pub probs: ProbabilityVector<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(architecture: Architecture, input_dim: usize, num_classes: usize) -> Result<Self> {
        architecture.validate()?;
        if input_dim == 0 || num_classes < 2 {
            return Err(AlimError::invalid(format!(
                "need input_dim > 0 and at least 2 classes, got {input_dim} and {num_classes}"
            )));
        }
        let layers = match architecture {
            Architecture::Linear => vec![Dense::zeros(input_dim, num_classes)],
            Architecture::Mlp { hidden } => vec![
                Dense::zeros(input_dim, hidden),
                Dense::zeros(hidden, num_classes),
            ],
        };
        Ok(Self { architecture, layers })
    }

    /// Weights uniform on `+-1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(
        architecture: Architecture,
        input_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(architecture, input_dim, num_classes)?;
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
            for w in &mut layer.weights {
                *w = T::lit(dist.sample(rng));
            }
        }
        Ok(params)
    }

    /// Assembles parameters from explicit layers (e.g. a checkpoint).
    pub fn from_layers(architecture: Architecture, layers: Vec<Dense<T>>) -> Result<Self> {
        let expected = match architecture {
            Architecture::Linear => 1,
            Architecture::Mlp { .. } => 2,
        };
        if layers.len() != expected {
            return Err(AlimError::ShapeMismatch {
                expected,
                actual: layers.len(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(AlimError::ShapeMismatch {
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                });
            }
        }
        if let Architecture::Mlp { hidden } = architecture {
            if layers[0].outputs != hidden {
                return Err(AlimError::ShapeMismatch {
                    expected: hidden,
                    actual: layers[0].outputs,
                });
            }
        }
        for layer in &layers {
            if layer.weights.len() != layer.inputs * layer.outputs || layer.bias.len() != layer.outputs {
                return Err(AlimError::invalid("layer buffers do not match declared shape"));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(AlimError::invalid("parameters must be finite"));
            }
        }
        Ok(Self { architecture, layers })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// All parameters, layer by layer, weights before bias.
    pub fn to_flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(AlimError::ShapeMismatch {
                expected: self.num_params(),
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            architecture: self.architecture,
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || !self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
        {
            return Err(AlimError::ShapeMismatch {
                expected: self.num_params(),
                actual: other.num_params(),
            });
        }
        Ok(())
    }

    fn check_input(&self, features: &[T]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(AlimError::ShapeMismatch {
                expected: self.input_dim(),
                actual: features.len(),
            });
        }
        Ok(())
    }

    pub fn forward_trace(&self, features: &[T]) -> Result<ForwardTrace<T>> {
        self.check_input(features)?;
        let (hidden, logits) = match self.layers.as_slice() {
            [out] => (None, out.affine(features)),
            [first, out] => {
                let h: Vec<T> = first
                    .affine(features)
                    .into_iter()
                    .map(|v| v.max(T::zero()))
                    .collect();
                let logits = out.affine(&h);
                (Some(h), logits)
            }
            _ => unreachable!("architectures have one or two layers"),
        };
        Ok(ForwardTrace {
            hidden,
            probs: softmax(&logits),
        })
    }

    /// Class probabilities `P(x)`.
    pub fn forward(&self, features: &[T]) -> Result<ProbabilityVector<T>> {
        Ok(self.forward_trace(features)?.probs)
    }

    /// Adds `scale * d pll_loss / d theta` into `grads` using a stored trace.
    /// The target `w` is treated as a constant.
    pub fn accumulate_gradient(
        &self,
        features: &[T],
        trace: &ForwardTrace<T>,
        target: &PseudoLabel<T>,
        scale: T,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        self.check_input(features)?;
        if target.len() != self.num_classes() {
            return Err(AlimError::ShapeMismatch {
                expected: self.num_classes(),
                actual: target.len(),
            });
        }
        let delta: Vec<T> = trace
            .probs
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(&p, &w)| (p - w) * scale)
            .collect();

        match (self.layers.as_slice(), trace.hidden.as_deref()) {
            ([_], None) => accumulate_dense(&mut grads.layers[0], &delta, features),
            ([_, out], Some(hidden)) => {
                accumulate_dense(&mut grads.layers[1], &delta, hidden);
                let mut back = vec![T::zero(); out.inputs];
                for (row, &d) in out.weights.chunks_exact(out.inputs).zip(&delta) {
                    for (b, &w) in back.iter_mut().zip(row) {
                        *b += w * d;
                    }
                }
                for (b, &h) in back.iter_mut().zip(hidden) {
                    if h <= T::zero() {
                        *b = T::zero();
                    }
                }
                accumulate_dense(&mut grads.layers[0], &back, features);
            }
            _ => unreachable!("trace matches architecture"),
        }
        Ok(())
    }

    /// Loss and exact gradient of `pll_loss(forward(x), w)` for one sample.
    pub fn backward(&self, features: &[T], target: &PseudoLabel<T>) -> Result<(T, Gradients<T>)> {
        let trace = self.forward_trace(features)?;
        let mut grads = self.zeros_like();
        self.accumulate_gradient(features, &trace, target, T::one(), &mut grads)?;
        Ok((pll_loss(&trace.probs, target), grads))
    }
}

fn accumulate_dense<T: Real>(layer: &mut Dense<T>, delta: &[T], input: &[T]) {
    for ((row, b), &d) in layer
        .weights
        .chunks_exact_mut(layer.inputs)
        .zip(layer.bias.iter_mut())
        .zip(delta)
    {
        if d == T::zero() {
            continue;
        }
        for (w, &x) in row.iter_mut().zip(input) {
            *w += d * x;
        }
        *b += d;
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> ProbabilityVector<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    ProbabilityVector::from_softmax(exps.into_iter().map(|e| e / total).collect())
}

/// Cross-entropy `-sum_i w_i ln P_i`, with `P_i` floored at [`LOG_FLOOR`].
pub fn pll_loss<T: Real>(p: &ProbabilityVector<T>, w: &PseudoLabel<T>) -> T {
    let floor = T::lit(LOG_FLOOR);
    -p.as_slice()
        .iter()
        .zip(w.as_slice())
        .filter(|(_, &wi)| wi != T::zero())
        .map(|(&pi, &wi)| wi * pi.max(floor).ln())
        .sum::<T>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(AlimError::invalid(format!("learning rate must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AlimError::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(AlimError::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Cosine-annealed rate `base * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let progress = epoch.min(total_epochs) as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Momentum buffers plus the schedule position.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub velocity: Gradients<T>,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, config: OptimizerConfig, total_epochs: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params.zeros_like(),
            epoch: 0,
            total_epochs,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        cosine_lr(self.config.base_lr, self.epoch, self.total_epochs)
    }
}

/// `v <- m v + g + wd theta; theta <- theta - lr(epoch) v`.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    params.check_same_shape(grads)?;
    params.check_same_shape(&state.velocity)?;
    let lr = T::lit(state.learning_rate());
    let momentum = T::lit(state.config.momentum);
    let decay = T::lit(state.config.weight_decay);
    for ((layer, grad), vel) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.velocity.layers.iter_mut())
    {
        let thetas = layer.weights.iter_mut().chain(layer.bias.iter_mut());
        let gs = grad.weights.iter().chain(&grad.bias);
        let vs = vel.weights.iter_mut().chain(vel.bias.iter_mut());
        for ((theta, &g), v) in thetas.zip(gs).zip(vs) {
            *v = momentum * *v + g + decay * *theta;
            *theta -= lr * *v;
        }
    }
    Ok(())
}
