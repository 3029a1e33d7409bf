//! Dense multilayer-perceptron numerics in double precision.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`, so row `r` of a
//! layer is the contiguous slice `weights[r * in_dim..(r + 1) * in_dim]`. That
//! layout lets the action decoder grow by appending rows without touching the
//! existing ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the post-activation value `y`.
    #[inline]
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = glorot_bound(in_dim, out_dim);
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub layers: Vec<Layer>,
}

impl ParamBundle {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer chain broken: {} outputs feed {} inputs",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Shape("layer buffers do not match declared dims".into()));
            }
        }
        Ok(Self { layers })
    }

    /// MLP with the given hidden widths (relu) and an output activation.
    pub fn mlp<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(Layer::glorot(prev, h, Activation::Relu, rng));
            prev = h;
        }
        layers.push(Layer::glorot(prev, out_dim, output, rng));
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> GradBundle {
        GradBundle {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Mutable access by position in [`values`](Self::values) order.
    pub fn flat_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.weights.len() {
                return &mut l.weights[k];
            }
            k -= l.weights.len();
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("flat index out of range")
    }

    pub fn congruent(&self, grads: &GradBundle) -> bool {
        self.layers.len() == grads.layers.len()
            && self.layers.iter().zip(&grads.layers).all(|(l, g)| {
                l.weights.len() == g.weights.len() && l.bias.len() == g.bias.len()
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-parameter partial derivatives, shaped like a [`ParamBundle`].
///
/// The same shape doubles as a container for per-parameter statistics such as
/// Fisher diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradBundle {
    pub layers: Vec<LayerGrad>,
}

impl GradBundle {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Per-layer activations recorded by [`net_forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

pub fn net_forward(params: &ParamBundle, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if input.len() != params.in_dim() {
        return Err(Error::Shape(format!(
            "input length {} but network expects {}",
            input.len(),
            params.in_dim()
        )));
    }
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(input.to_vec());
    for layer in &params.layers {
        let x = activations.last().unwrap();
        let mut y = layer.bias.clone();
        for (r, out) in y.iter_mut().enumerate() {
            *out += dot(layer.row(r), x);
            *out = layer.activation.apply(*out);
        }
        activations.push(y);
    }
    let output = activations.last().unwrap().clone();
    Ok((output, ForwardCache { activations }))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_cache(params: &ParamBundle, cache: &ForwardCache, upstream: &[f64]) -> Result<()> {
    let stale = cache.activations.len() != params.layers.len() + 1
        || params
            .layers
            .iter()
            .enumerate()
            .any(|(i, l)| {
                cache.activations[i].len() != l.in_dim || cache.activations[i + 1].len() != l.out_dim
            });
    if stale {
        return Err(Error::Shape("forward cache does not match parameters".into()));
    }
    if upstream.len() != params.out_dim() {
        return Err(Error::Shape(format!(
            "upstream gradient length {} but network output is {}",
            upstream.len(),
            params.out_dim()
        )));
    }
    Ok(())
}

/// Gradients of `upstream · output` with respect to every parameter and the input.
pub fn net_backward(
    params: &ParamBundle,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<(GradBundle, Vec<f64>)> {
    let mut grads = params.zeros_like();
    let input_grad = net_backward_acc(params, cache, upstream, &mut grads)?;
    Ok((grads, input_grad))
}

/// Like [`net_backward`] but adds into an existing gradient buffer.
pub fn net_backward_acc(
    params: &ParamBundle,
    cache: &ForwardCache,
    upstream: &[f64],
    grads: &mut GradBundle,
) -> Result<Vec<f64>> {
    check_cache(params, cache, upstream)?;
    if !params.congruent(grads) {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    let mut delta = upstream.to_vec();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let y = &cache.activations[li + 1];
        let x = &cache.activations[li];
        for (d, &yv) in delta.iter_mut().zip(y) {
            *d *= layer.activation.derivative(yv);
        }
        let g = &mut grads.layers[li];
        let mut dx = vec![0.0; layer.in_dim];
        for (r, &dr) in delta.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            g.bias[r] += dr;
            let gw = &mut g.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (gwj, &xj) in gw.iter_mut().zip(x) {
                *gwj += dr * xj;
            }
            for (dxj, &wj) in dx.iter_mut().zip(layer.row(r)) {
                *dxj += dr * wj;
            }
        }
        delta = dx;
    }
    Ok(delta)
}

/// Input gradient only; parameters are treated as constants.
pub fn net_input_grad(params: &ParamBundle, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
    check_cache(params, cache, upstream)?;
    let mut delta = upstream.to_vec();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let y = &cache.activations[li + 1];
        for (d, &yv) in delta.iter_mut().zip(y) {
            *d *= layer.activation.derivative(yv);
        }
        let mut dx = vec![0.0; layer.in_dim];
        for (r, &dr) in delta.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            for (dxj, &wj) in dx.iter_mut().zip(layer.row(r)) {
                *dxj += dr * wj;
            }
        }
        delta = dx;
    }
    Ok(delta)
}

/// Softmax restricted to the active entries; inactive entries get exactly 0.
pub fn softmax_masked(logits: &[f64], active: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != active.len() {
        return Err(Error::Shape(format!(
            "{} logits but mask of length {}",
            logits.len(),
            active.len()
        )));
    }
    let max = logits
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    if !max.is_finite() {
        return Err(Error::NumericFault("nonfinite logit".into()));
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(active)
        .map(|(&z, &a)| if a { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// `-ln probs[target]`, with the probability floored at [`PROB_FLOOR`].
///
/// A zero-probability target means the data and the action space disagree;
/// the floored loss is still returned so training can continue, and a warning
/// is logged.
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    let p = probs.get(target).copied().unwrap_or(0.0);
    if p <= 0.0 {
        log::warn!("cross-entropy target {target} has zero probability: data/action-space mismatch");
    }
    -p.max(PROB_FLOOR).ln()
}

/// Shannon entropy (nats) of a probability vector; zero entries contribute 0.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Bound on the global L2 norm of the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            decay: 0.99,
            epsilon: 1e-8,
            clip_norm: Some(40.0),
        }
    }
}

/// RMSProp state: running mean of squared gradients per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: OptConfig,
    pub mean_sq: GradBundle,
    pub steps: u64,
}

impl OptState {
    pub fn new(params: &ParamBundle, config: OptConfig) -> Self {
        Self {
            config,
            mean_sq: params.zeros_like(),
            steps: 0,
        }
    }

    /// Keeps accumulators for surviving entries when a layer gains output rows.
    pub fn resize_for(&mut self, params: &ParamBundle) {
        for (acc, layer) in self.mean_sq.layers.iter_mut().zip(&params.layers) {
            acc.weights.resize(layer.weights.len(), 0.0);
            acc.bias.resize(layer.bias.len(), 0.0);
        }
    }
}

/// Quadratic pull `Σ_j (w_j/2)(θ − c_j)²` applied as an exact proximal step,
/// stored as per-parameter totals `Σ_j w_j` and `Σ_j w_j·c_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Proximal {
    pub weight: GradBundle,
    pub pull: GradBundle,
}

/// One clipped RMSProp step: `ms ← ρ·ms + (1−ρ)·g²`, `p ← p − lr·g/√(ms+ε)`.
pub fn opt_step(params: &mut ParamBundle, grads: &GradBundle, state: &mut OptState) -> Result<()> {
    opt_step_prox(params, grads, state, None)
}

/// RMSProp step followed, when given, by the proximal map of a quadratic
/// pull using the same per-parameter step size `η = lr/√(ms+ε)`:
/// `p ← (p + η·Σw·c) / (1 + η·Σw)`. Stable for arbitrarily stiff pulls.
pub fn opt_step_prox(
    params: &mut ParamBundle,
    grads: &GradBundle,
    state: &mut OptState,
    prox: Option<&Proximal>,
) -> Result<()> {
    if !params.congruent(grads) || !params.congruent(&state.mean_sq) {
        return Err(Error::Shape("optimizer inputs are not shape-congruent".into()));
    }
    if let Some(px) = prox {
        if !params.congruent(&px.weight) || !params.congruent(&px.pull) {
            return Err(Error::Shape("proximal terms are not shape-congruent".into()));
        }
    }
    if !grads.is_finite() {
        return Err(Error::NumericFault("nonfinite gradient entry".into()));
    }
    let cfg = state.config;
    let norm = grads.norm_sq().sqrt();
    let scale = match cfg.clip_norm {
        Some(bound) if norm > bound => bound / norm,
        _ => 1.0,
    };
    for ((p, &g), ms) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.mean_sq.values_mut())
    {
        let g = g * scale;
        *ms = cfg.decay * *ms + (1.0 - cfg.decay) * g * g;
        *p -= cfg.learning_rate * g / (*ms + cfg.epsilon).sqrt();
    }
    if let Some(px) = prox {
        for (((p, ms), &w), &c) in params
            .values_mut()
            .zip(state.mean_sq.values())
            .zip(px.weight.values())
            .zip(px.pull.values())
        {
            if w > 0.0 {
                let eta = cfg.learning_rate / (ms + cfg.epsilon).sqrt();
                *p = (*p + eta * c) / (1.0 + eta * w);
            }
        }
    }
    state.steps += 1;
    if !params.is_finite() {
        return Err(Error::NumericFault("parameters became nonfinite".into()));
    }
    Ok(())
}

/// Largest relative disagreement between analytic gradients and central
/// differences: `max |analytic − numeric| / max(1, |numeric|)`.
///
/// `loss_and_grad` must return the loss and its analytic gradient for the
/// given parameters.
pub fn fd_check<F>(loss_and_grad: F, params: &ParamBundle, h: f64) -> f64
where
    F: Fn(&ParamBundle) -> (f64, GradBundle),
{
    let (_, analytic) = loss_and_grad(params);
    let analytic: Vec<f64> = analytic.values().copied().collect();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *probe.flat_mut(k);
        *probe.flat_mut(k) = orig + h;
        let plus = loss_and_grad(&probe).0;
        *probe.flat_mut(k) = orig - h;
        let minus = loss_and_grad(&probe).0;
        *probe.flat_mut(k) = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}
