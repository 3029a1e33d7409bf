//! Self-supervised action representations.
//!
//! An encoder maps an observed state change `(s, s')` to a representation `e`,
//! and a linear decoder maps `e` to a distribution over the actions seen so
//! far. Both are trained by predicting which action produced the change.
//! When the action set grows, the decoder gains one output row per new action;
//! when it shrinks, the missing actions are only masked out. Later tasks
//! fine-tune with a Fisher-weighted quadratic anchor on the decoder.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{self, ActionSpace, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::{
    self, glorot_bound, net_backward_acc, net_forward, softmax_masked, Activation, ForwardCache,
    GradBundle, Layer, OptConfig, OptState, ParamBundle, Proximal,
};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub s_next: Vec<f64>,
}

impl Transition {
    pub fn pair(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.s.len() * 2);
        v.extend_from_slice(&self.s);
        v.extend_from_slice(&self.s_next);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprConfig {
    /// Representation size d.
    pub dim: usize,
    pub encoder_hidden: Vec<usize>,
    /// Squash encoder outputs into (0, 1) so they share the policy's range.
    pub encoder_sigmoid: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            encoder_hidden: vec![64],
            encoder_sigmoid: true,
            epochs: 20,
            batch_size: 256,
            learning_rate: 2e-3,
        }
    }
}

impl ReprConfig {
    fn opt(&self) -> OptConfig {
        OptConfig {
            learning_rate: self.learning_rate,
            ..OptConfig::default()
        }
    }
}

/// Which parameters the fine-tuning anchor constrains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorTarget {
    None,
    #[default]
    Decoder,
    Encoder,
    Both,
}

impl AnchorTarget {
    fn decoder(self) -> bool {
        matches!(self, AnchorTarget::Decoder | AnchorTarget::Both)
    }

    fn encoder(self) -> bool {
        matches!(self, AnchorTarget::Encoder | AnchorTarget::Both)
    }
}

/// Parameter snapshot and Fisher diagonal recorded when a task completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub decoder: ParamBundle,
    pub decoder_fisher: GradBundle,
    pub encoder: Option<(ParamBundle, GradBundle)>,
}

impl Anchor {
    fn rows(&self) -> usize {
        self.decoder.out_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDecoder {
    pub encoder: ParamBundle,
    /// Single linear layer; output row `r` scores catalog action `rows[r]`.
    pub decoder: ParamBundle,
    pub rows: Vec<usize>,
    pub seen: Vec<bool>,
    pub anchors: Vec<Anchor>,
    pub obs_len: usize,
}

impl EncoderDecoder {
    /// Fresh state with no seen actions (the decoder has zero rows).
    pub fn new(obs_len: usize, catalog_len: usize, cfg: &ReprConfig, rng: &mut Rng) -> Self {
        let head = if cfg.encoder_sigmoid {
            Activation::Sigmoid
        } else {
            Activation::Linear
        };
        Self {
            encoder: ParamBundle::mlp(2 * obs_len, &cfg.encoder_hidden, cfg.dim, head, rng),
            decoder: ParamBundle {
                layers: vec![Layer::zeros(cfg.dim, 0, Activation::Linear)],
            },
            rows: Vec::new(),
            seen: vec![false; catalog_len],
            anchors: Vec::new(),
            obs_len,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn catalog_len(&self) -> usize {
        self.seen.len()
    }

    pub fn seen_count(&self) -> usize {
        self.rows.len()
    }

    /// Catalog-length logits; entries without a decoder row are 0 and must be
    /// masked by the caller.
    pub fn logits(&self, e: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let (row_logits, cache) = net_forward(&self.decoder, e)?;
        let mut logits = vec![0.0; self.catalog_len()];
        for (r, &a) in self.rows.iter().enumerate() {
            logits[a] = row_logits[r];
        }
        Ok((logits, cache))
    }

    /// Gathers a catalog-length vector into decoder-row order.
    pub fn to_rows(&self, catalog_vec: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|&a| catalog_vec[a]).collect()
    }

    pub fn covers(&self, active: &[bool]) -> bool {
        active.iter().zip(&self.seen).all(|(&a, &s)| !a || s)
    }

    fn check_active(&self, active: &[bool]) -> Result<()> {
        if active.len() != self.catalog_len() {
            return Err(Error::Shape("active mask length differs from catalog".into()));
        }
        if !self.covers(active) {
            return Err(Error::Data("active action has no decoder row".into()));
        }
        Ok(())
    }
}

pub fn encode(state: &EncoderDecoder, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    if s.len() != state.obs_len || s_next.len() != state.obs_len {
        return Err(Error::Shape(format!(
            "observation lengths {} and {} but encoder expects {}",
            s.len(),
            s_next.len(),
            state.obs_len
        )));
    }
    let mut x = s.to_vec();
    x.extend_from_slice(s_next);
    Ok(net_forward(&state.encoder, &x)?.0)
}

/// Action distribution over the catalog for representation `e`.
pub fn decode(state: &EncoderDecoder, e: &[f64], active: &[bool]) -> Result<Vec<f64>> {
    state.check_active(active)?;
    let (logits, _) = state.logits(e)?;
    softmax_masked(&logits, active)
}

/// Source of exploration actions.
pub trait ExplorationPolicy {
    fn choose(&mut self, observation: &[f64], space: &ActionSpace) -> usize;
}

/// Uniform over the active actions.
pub struct UniformExploration {
    rng: Rng,
}

impl UniformExploration {
    pub fn new(rng: Rng) -> Self {
        Self { rng }
    }
}

impl ExplorationPolicy for UniformExploration {
    fn choose(&mut self, _observation: &[f64], space: &ActionSpace) -> usize {
        let actions: Vec<usize> = space.indices().collect();
        actions[self.rng.gen_range(0..actions.len())]
    }
}

/// Reward-free transitions from consecutive seeded episodes.
pub fn collect_transitions(
    task: &TaskSpec,
    policy: &mut dyn ExplorationPolicy,
    count: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(count);
    let mut episode = 0u64;
    while out.len() < count {
        let (mut state, mut obs) = envs::env_reset(task, rng::derive_seed(seed, "explore-episode", episode))?;
        episode += 1;
        while !state.done && out.len() < count {
            let a = policy.choose(&obs, &task.space);
            let step = envs::env_step(&state, a, task)?;
            out.push(Transition {
                s: obs,
                a,
                s_next: step.observation.clone(),
            });
            state = step.state;
            obs = step.observation;
        }
    }
    Ok(out)
}

/// Grows the decoder for newly available actions and records them as seen.
///
/// Existing rows are left untouched; new rows get Glorot-uniform weights and
/// zero bias. Removing actions changes nothing here: callers simply stop
/// including them in the active mask.
pub fn adapt_structure(state: &mut EncoderDecoder, new_space: &ActionSpace, rng: &mut Rng) -> Result<()> {
    if new_space.mask.len() != state.catalog_len() {
        return Err(Error::Shape("action space belongs to a different catalog".into()));
    }
    let fresh: Vec<usize> = new_space.indices().filter(|&a| !state.seen[a]).collect();
    if fresh.is_empty() {
        return Ok(());
    }
    let layer = &mut state.decoder.layers[0];
    let bound = glorot_bound(layer.in_dim, layer.out_dim + fresh.len());
    for &a in &fresh {
        for _ in 0..layer.in_dim {
            layer.weights.push(rng.gen_range(-bound..=bound));
        }
        layer.bias.push(0.0);
        layer.out_dim += 1;
        state.rows.push(a);
        state.seen[a] = true;
    }
    Ok(())
}

/// Per-sample forward pass shared by training, Fisher and accuracy.
struct Sample {
    enc_cache: ForwardCache,
    dec_cache: ForwardCache,
    probs: Vec<f64>,
}

fn forward_sample(state: &EncoderDecoder, t: &Transition, active: &[bool]) -> Result<Sample> {
    let (e, enc_cache) = net_forward(&state.encoder, &t.pair())?;
    let (logits, dec_cache) = state.logits(&e)?;
    let probs = softmax_masked(&logits, active)?;
    Ok(Sample { enc_cache, dec_cache, probs })
}

/// Gradient of `-log p(a)` with respect to the decoder rows.
fn nll_row_grad(state: &EncoderDecoder, probs: &[f64], a: usize) -> Vec<f64> {
    state
        .rows
        .iter()
        .map(|&c| probs[c] - if c == a { 1.0 } else { 0.0 })
        .collect()
}

fn check_buffer(buffer: &[Transition], state: &EncoderDecoder, active: &[bool]) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::Data("empty transition buffer".into()));
    }
    state.check_active(active)?;
    if let Some(t) = buffer.iter().find(|t| !active.get(t.a).copied().unwrap_or(false)) {
        return Err(Error::Data(format!("buffer action {} is not in the active set", t.a)));
    }
    Ok(())
}

/// Mean cross-entropy of the decoder's prediction over a set of transitions,
/// with gradients for encoder and decoder.
pub fn prediction_loss(
    state: &EncoderDecoder,
    batch: &[&Transition],
    active: &[bool],
) -> Result<(f64, GradBundle, GradBundle)> {
    let mut g_enc = state.encoder.zeros_like();
    let mut g_dec = state.decoder.zeros_like();
    let mut loss = 0.0;
    for t in batch {
        let s = forward_sample(state, t, active)?;
        loss += numerics::cross_entropy(&s.probs, t.a);
        let up = nll_row_grad(state, &s.probs, t.a);
        let de = net_backward_acc(&state.decoder, &s.dec_cache, &up, &mut g_dec)?;
        net_backward_acc(&state.encoder, &s.enc_cache, &de, &mut g_enc)?;
    }
    let n = batch.len() as f64;
    g_enc.scale(1.0 / n);
    g_dec.scale(1.0 / n);
    Ok((loss / n, g_enc, g_dec))
}

/// `(λ/2) Σ_j Σ_k F_k^j (θ_k − θ_k^j)²` over the first `rows` decoder rows of
/// each anchor (all entries for the encoder), with its gradient.
pub fn anchor_penalty(
    state: &EncoderDecoder,
    lambda: f64,
    target: AnchorTarget,
) -> Result<(f64, GradBundle, GradBundle)> {
    let mut g_enc = state.encoder.zeros_like();
    let mut g_dec = state.decoder.zeros_like();
    let mut value = 0.0;
    for anchor in &state.anchors {
        if target.decoder() {
            let rows = anchor.rows();
            let cur = &state.decoder.layers[0];
            let old = &anchor.decoder.layers[0];
            let fis = &anchor.decoder_fisher.layers[0];
            if rows > cur.out_dim || old.in_dim != cur.in_dim || fis.bias.len() != rows {
                return Err(Error::Internal("decoder anchor is not congruent with the decoder".into()));
            }
            let nw = rows * cur.in_dim;
            let gl = &mut g_dec.layers[0];
            for k in 0..nw {
                let diff = cur.weights[k] - old.weights[k];
                value += fis.weights[k] * diff * diff;
                gl.weights[k] += lambda * fis.weights[k] * diff;
            }
            for k in 0..rows {
                let diff = cur.bias[k] - old.bias[k];
                value += fis.bias[k] * diff * diff;
                gl.bias[k] += lambda * fis.bias[k] * diff;
            }
        }
        if target.encoder() {
            let (old, fis) = anchor
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Internal("anchor lacks an encoder snapshot".into()))?;
            if !state.encoder.congruent(fis) || old.num_params() != state.encoder.num_params() {
                return Err(Error::Internal("encoder anchor is not congruent with the encoder".into()));
            }
            for (((g, &p), &o), &f) in g_enc
                .values_mut()
                .zip(state.encoder.values())
                .zip(old.values())
                .zip(fis.values())
            {
                let diff = p - o;
                value += f * diff * diff;
                *g += lambda * f * diff;
            }
        }
    }
    Ok((0.5 * lambda * value, g_enc, g_dec))
}

/// The anchor penalty of [`anchor_penalty`] in proximal form, one term per
/// parameter group (absent when the group is not anchored).
pub fn anchor_proximal(
    state: &EncoderDecoder,
    lambda: f64,
    target: AnchorTarget,
) -> Result<(Option<Proximal>, Option<Proximal>)> {
    let mut enc = None;
    let mut dec = None;
    for anchor in &state.anchors {
        if target.decoder() {
            let rows = anchor.rows();
            let cur = &state.decoder.layers[0];
            let old = &anchor.decoder.layers[0];
            let fis = &anchor.decoder_fisher.layers[0];
            if rows > cur.out_dim || old.in_dim != cur.in_dim || fis.bias.len() != rows {
                return Err(Error::Internal("decoder anchor is not congruent with the decoder".into()));
            }
            let px = dec.get_or_insert_with(|| Proximal {
                weight: state.decoder.zeros_like(),
                pull: state.decoder.zeros_like(),
            });
            let nw = rows * cur.in_dim;
            for k in 0..nw {
                px.weight.layers[0].weights[k] += lambda * fis.weights[k];
                px.pull.layers[0].weights[k] += lambda * fis.weights[k] * old.weights[k];
            }
            for k in 0..rows {
                px.weight.layers[0].bias[k] += lambda * fis.bias[k];
                px.pull.layers[0].bias[k] += lambda * fis.bias[k] * old.bias[k];
            }
        }
        if target.encoder() {
            let (old, fis) = anchor
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Internal("anchor lacks an encoder snapshot".into()))?;
            if !state.encoder.congruent(fis) || old.num_params() != state.encoder.num_params() {
                return Err(Error::Internal("encoder anchor is not congruent with the encoder".into()));
            }
            let px = enc.get_or_insert_with(|| Proximal {
                weight: state.encoder.zeros_like(),
                pull: state.encoder.zeros_like(),
            });
            for (((w, c), &o), &f) in px
                .weight
                .values_mut()
                .zip(px.pull.values_mut())
                .zip(old.values())
                .zip(fis.values())
            {
                *w += lambda * f;
                *c += lambda * f * o;
            }
        }
    }
    Ok((enc, dec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Mean prediction loss over the whole buffer before the first update.
    pub initial: f64,
    /// Mean prediction loss over the buffer after each epoch.
    pub epochs: Vec<f64>,
}

impl LossTrace {
    pub fn last(&self) -> f64 {
        self.epochs.last().copied().unwrap_or(self.initial)
    }
}

fn mean_buffer_loss(state: &EncoderDecoder, buffer: &[Transition], active: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    for t in buffer {
        total += numerics::cross_entropy(&forward_sample(state, t, active)?.probs, t.a);
    }
    Ok(total / buffer.len() as f64)
}

fn train(
    buffer: &[Transition],
    state: &mut EncoderDecoder,
    active: &[bool],
    cfg: &ReprConfig,
    rng: &mut Rng,
    lambda: f64,
    target: AnchorTarget,
) -> Result<LossTrace> {
    check_buffer(buffer, state, active)?;
    let initial = mean_buffer_loss(state, buffer, active)?;
    let mut trace = LossTrace { initial, epochs: Vec::with_capacity(cfg.epochs) };
    if cfg.epochs == 0 {
        return Ok(trace);
    }
    let mut enc_opt = OptState::new(&state.encoder, cfg.opt());
    let mut dec_opt = OptState::new(&state.decoder, cfg.opt());
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let (enc_prox, dec_prox) = if lambda > 0.0 {
        anchor_proximal(state, lambda, target)?
    } else {
        (None, None)
    };
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &buffer[i]).collect();
            let (_, g_enc, g_dec) = prediction_loss(state, &batch, active)?;
            numerics::opt_step_prox(&mut state.encoder, &g_enc, &mut enc_opt, enc_prox.as_ref())?;
            numerics::opt_step_prox(&mut state.decoder, &g_dec, &mut dec_opt, dec_prox.as_ref())?;
        }
        trace.epochs.push(mean_buffer_loss(state, buffer, active)?);
    }
    Ok(trace)
}

/// Minibatch training of encoder and decoder on action prediction.
pub fn ssl_train(
    buffer: &[Transition],
    state: &mut EncoderDecoder,
    active: &[bool],
    cfg: &ReprConfig,
    rng: &mut Rng,
) -> Result<LossTrace> {
    train(buffer, state, active, cfg, rng, 0.0, AnchorTarget::None)
}

/// Action prediction plus the quadratic anchor penalty on the chosen target.
/// With the default target only the decoder is constrained.
pub fn finetune(
    buffer: &[Transition],
    state: &mut EncoderDecoder,
    active: &[bool],
    lambda: f64,
    target: AnchorTarget,
    cfg: &ReprConfig,
    rng: &mut Rng,
) -> Result<LossTrace> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("anchor coefficient must be finite and >= 0, got {lambda}")));
    }
    train(buffer, state, active, cfg, rng, lambda, target)
}

/// Empirical diagonal Fisher of `log g(a | f(s, s'))` with respect to the
/// decoder, using the recorded action labels.
pub fn compute_fisher(buffer: &[Transition], state: &EncoderDecoder, active: &[bool]) -> Result<GradBundle> {
    Ok(fisher(buffer, state, active, false)?.1)
}

/// Encoder and decoder Fisher diagonals in one pass.
pub fn compute_fisher_both(
    buffer: &[Transition],
    state: &EncoderDecoder,
    active: &[bool],
) -> Result<(GradBundle, GradBundle)> {
    let (enc, dec) = fisher(buffer, state, active, true)?;
    Ok((enc.expect("encoder fisher requested"), dec))
}

fn fisher(
    buffer: &[Transition],
    state: &EncoderDecoder,
    active: &[bool],
    with_encoder: bool,
) -> Result<(Option<GradBundle>, GradBundle)> {
    check_buffer(buffer, state, active)?;
    let mut f_dec = state.decoder.zeros_like();
    let mut f_enc = with_encoder.then(|| state.encoder.zeros_like());
    for t in buffer {
        let s = forward_sample(state, t, active)?;
        let up = nll_row_grad(state, &s.probs, t.a);
        let mut g_dec = state.decoder.zeros_like();
        let de = net_backward_acc(&state.decoder, &s.dec_cache, &up, &mut g_dec)?;
        for (f, g) in f_dec.values_mut().zip(g_dec.values()) {
            *f += g * g;
        }
        if let Some(f_enc) = f_enc.as_mut() {
            let mut g_enc = state.encoder.zeros_like();
            net_backward_acc(&state.encoder, &s.enc_cache, &de, &mut g_enc)?;
            for (f, g) in f_enc.values_mut().zip(g_enc.values()) {
                *f += g * g;
            }
        }
    }
    let n = buffer.len() as f64;
    f_dec.scale(1.0 / n);
    if let Some(f) = f_enc.as_mut() {
        f.scale(1.0 / n);
    }
    Ok((f_enc, f_dec))
}

/// Snapshot of the current parameters together with their Fisher diagonals.
pub fn make_anchor(
    buffer: &[Transition],
    state: &EncoderDecoder,
    active: &[bool],
    with_encoder: bool,
) -> Result<Anchor> {
    let (f_enc, f_dec) = fisher(buffer, state, active, with_encoder)?;
    Ok(Anchor {
        decoder: state.decoder.clone(),
        decoder_fisher: f_dec,
        encoder: f_enc.map(|f| (state.encoder.clone(), f)),
    })
}

/// Fraction of transitions whose argmax decoded action equals the label.
/// Ties resolve to the lowest catalog index.
pub fn decode_accuracy<'a, I>(state: &EncoderDecoder, transitions: I, active: &[bool]) -> Result<f64>
where
    I: IntoIterator<Item = &'a Transition>,
{
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in transitions {
        let s = forward_sample(state, t, active)?;
        if argmax(&s.probs) == t.a {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Data("no transitions to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Writes `action,e_0,...,e_{d-1}` rows for each probe transition.
pub fn dump_embeddings(state: &EncoderDecoder, probes: &[Transition], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let header: Vec<String> = std::iter::once("action".to_string())
        .chain((0..state.dim()).map(|i| format!("e_{i}")))
        .collect();
    writeln!(out, "{}", header.join(",")).expect("write to memory");
    for t in probes {
        let e = encode(state, &t.s, &t.s_next)?;
        let row: Vec<String> = std::iter::once(t.a.to_string())
            .chain(e.iter().map(|v| v.to_string()))
            .collect();
        writeln!(out, "{}", row.join(",")).expect("write to memory");
    }
    crate::io::write_atomic(path, &out)
}
