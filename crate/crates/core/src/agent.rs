//! Actor-critic training shared by every method, and the representation agent.
//!
//! A policy network maps the (optionally conditioned) observation to an
//! output vector; an [`OutputHead`] turns that vector into logits over the
//! action catalog. For the representation agent the output is a point `e` in
//! representation space and the head is the frozen decoder, so
//! `π(a|s) = g(a | π̃(s))`. Baselines use the identity head over the full
//! catalog.
//!
//! Training is synchronous n-step advantage actor-critic over a small vector
//! of environments.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::action_repr::{
    self, adapt_structure, collect_transitions, finetune, make_anchor, ssl_train, AnchorTarget,
    EncoderDecoder, ExplorationPolicy, LossTrace, ReprConfig, UniformExploration,
};
use crate::envs::{self, ActionSpace, TaskSpec, RETURN_RANGE};
use crate::error::{Error, Result};
use crate::numerics::{
    self, net_backward_acc, net_forward, net_input_grad, softmax_masked, Activation, ForwardCache,
    GradBundle, OptConfig, OptState, ParamBundle,
};
use crate::rng::{self, Rng};

/// Header note carried by every training log.
pub const TRAINER_NOTE: &str =
    "synchronous n-step advantage actor-critic, single process; no distributed actors or off-policy correction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A2CConfig {
    pub gamma: f64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub prev_conditioning: bool,
    pub hidden: Vec<usize>,
    /// Emit one log record every this many updates.
    pub log_every: usize,
}

impl Default for A2CConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            rollout_len: 20,
            num_envs: 8,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 4e-4,
            prev_conditioning: true,
            hidden: vec![64],
            log_every: 10,
        }
    }
}

impl A2CConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.rollout_len == 0 || self.num_envs == 0 {
            return Err(Error::Config("rollout_len and num_envs must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::Config("coefficients must be nonnegative".into()));
        }
        Ok(())
    }

    fn opt(&self) -> OptConfig {
        OptConfig {
            learning_rate: self.learning_rate,
            ..OptConfig::default()
        }
    }
}

/// Maps the policy network output to catalog logits.
pub trait OutputHead {
    /// Catalog-length logits; entries outside [`support`](Self::support) are
    /// ignored.
    fn logits(&self, out: &[f64]) -> Result<(Vec<f64>, Option<ForwardCache>)>;
    /// Gradient with respect to the network output given the logit gradient.
    fn out_grad(&self, out: &[f64], cache: Option<&ForwardCache>, grad_logits: &[f64]) -> Result<Vec<f64>>;
    /// Catalog entries this head can score.
    fn support(&self) -> Vec<bool>;
    /// Previous-action feature fed back when conditioning is on.
    fn feature(&self, out: &[f64], action: usize) -> Vec<f64>;
    fn feature_len(&self) -> usize;
    fn out_activation(&self) -> Activation;
    /// Digest of any parameters the head reads but must never change.
    fn frozen_digest(&self) -> u64 {
        0
    }
}

/// Routes the policy's representation through a frozen decoder.
pub struct DecoderHead<'a> {
    pub encdec: &'a EncoderDecoder,
}

impl OutputHead for DecoderHead<'_> {
    fn logits(&self, out: &[f64]) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        let (l, c) = self.encdec.logits(out)?;
        Ok((l, Some(c)))
    }

    fn out_grad(&self, _out: &[f64], cache: Option<&ForwardCache>, grad_logits: &[f64]) -> Result<Vec<f64>> {
        let cache = cache.ok_or_else(|| Error::Internal("decoder cache missing".into()))?;
        net_input_grad(&self.encdec.decoder, cache, &self.encdec.to_rows(grad_logits))
    }

    fn support(&self) -> Vec<bool> {
        self.encdec.seen.clone()
    }

    fn feature(&self, out: &[f64], _action: usize) -> Vec<f64> {
        out.to_vec()
    }

    fn feature_len(&self) -> usize {
        self.encdec.dim()
    }

    fn out_activation(&self) -> Activation {
        Activation::Sigmoid
    }

    fn frozen_digest(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.encdec.encoder.values().chain(self.encdec.decoder.values()) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Previous action feature and reward for conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeContext {
    pub prev_feature: Vec<f64>,
    pub prev_reward: f64,
}

impl EpisodeContext {
    pub fn new(feature_len: usize) -> Self {
        Self {
            prev_feature: vec![0.0; feature_len],
            prev_reward: 0.0,
        }
    }
}

/// Policy and value networks with their optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub policy: ParamBundle,
    pub value: ParamBundle,
    pub policy_opt: OptState,
    pub value_opt: OptState,
    pub cfg: A2CConfig,
    pub obs_len: usize,
    pub feature_len: usize,
}

impl ActorCritic {
    pub fn new(
        obs_len: usize,
        feature_len: usize,
        out_dim: usize,
        out_activation: Activation,
        cfg: &A2CConfig,
        rng: &mut Rng,
    ) -> Self {
        let in_dim = if cfg.prev_conditioning {
            obs_len + feature_len + 1
        } else {
            obs_len
        };
        let policy = ParamBundle::mlp(in_dim, &cfg.hidden, out_dim, out_activation, rng);
        let value = ParamBundle::mlp(in_dim, &cfg.hidden, 1, Activation::Linear, rng);
        Self {
            policy_opt: OptState::new(&policy, cfg.opt()),
            value_opt: OptState::new(&value, cfg.opt()),
            policy,
            value,
            cfg: cfg.clone(),
            obs_len,
            feature_len,
        }
    }

    pub fn input(&self, obs: &[f64], ctx: &EpisodeContext) -> Vec<f64> {
        let mut x = obs.to_vec();
        if self.cfg.prev_conditioning {
            x.extend_from_slice(&ctx.prev_feature);
            x.push(ctx.prev_reward);
        }
        x
    }

    pub fn value_of(&self, input: &[f64]) -> Result<f64> {
        Ok(net_forward(&self.value, input)?.0[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone)]
pub struct Action {
    pub index: usize,
    pub log_prob: f64,
    /// Policy network output (the representation `e` for the decoder head).
    pub output: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Picks an action among `active`, which must be within the head's support.
pub fn act(
    ac: &ActorCritic,
    head: &dyn OutputHead,
    input: &[f64],
    active: &[bool],
    mode: ActMode,
    rng: &mut Rng,
) -> Result<Action> {
    if !active.iter().any(|&a| a) {
        return Err(Error::EmptySupport);
    }
    let support = head.support();
    if active.iter().zip(&support).any(|(&a, &s)| a && !s) {
        return Err(Error::Data("active action outside the policy's support".into()));
    }
    let (out, _) = net_forward(&ac.policy, input)?;
    let (logits, _) = head.logits(&out)?;
    let probs = softmax_masked(&logits, active)?;
    let index = match mode {
        ActMode::Greedy => action_repr::argmax(&probs),
        ActMode::Sample => sample_index(&probs, rng),
    };
    Ok(Action {
        index,
        log_prob: probs[index].ln(),
        output: out,
        probs,
    })
}

fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub input: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

/// Consecutive steps from one environment plus the bootstrap input for the
/// state after the last step (unused when the last step ended the episode).
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<Step>,
    pub bootstrap: Vec<f64>,
    pub active: Vec<bool>,
}

/// n-step returns and advantages, held fixed while differentiating the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

pub fn compute_targets(batch: &[Rollout], ac: &ActorCritic) -> Result<Targets> {
    let gamma = ac.cfg.gamma;
    let mut returns = Vec::with_capacity(batch.len());
    let mut advantages = Vec::with_capacity(batch.len());
    for r in batch {
        let last_done = r.steps.last().map(|s| s.done).unwrap_or(true);
        let mut acc = if last_done { 0.0 } else { ac.value_of(&r.bootstrap)? };
        let mut ret = vec![0.0; r.steps.len()];
        for (i, s) in r.steps.iter().enumerate().rev() {
            if s.done {
                acc = 0.0;
            }
            acc = s.reward + gamma * acc;
            ret[i] = acc;
        }
        let adv = r
            .steps
            .iter()
            .zip(&ret)
            .map(|(s, &g)| Ok(g - ac.value_of(&s.input)?))
            .collect::<Result<Vec<_>>>()?;
        returns.push(ret);
        advantages.push(adv);
    }
    Ok(Targets { returns, advantages })
}

/// Behaviour-cloning sample: the stored policy input, the action mask in force
/// and the behaviour distribution over the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySample {
    pub input: Vec<f64>,
    pub active: Vec<bool>,
    pub probs: Vec<f64>,
}

/// Method-specific additions to the actor-critic objective.
pub trait Regularizer {
    /// Extra loss on the policy parameters and its gradient.
    fn penalty(&self, _policy: &ParamBundle) -> Option<(f64, GradBundle)> {
        None
    }
    /// Weight ρ of the behaviour-cloning term; the on-policy term gets 1 − ρ.
    fn replay_weight(&self) -> f64 {
        0.0
    }
    fn replay_batch(&mut self, _n: usize) -> Vec<ReplaySample> {
        Vec::new()
    }
    /// Sees every on-policy step with the behaviour distribution used.
    fn observe(&mut self, _input: &[f64], _active: &[bool], _action: usize, _probs: &[f64]) {}
}

pub struct NoRegularizer;

impl Regularizer for NoRegularizer {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub penalty: f64,
    pub bc: f64,
}

/// Actor-critic loss with fixed targets, and gradients for policy and value
/// parameters.
///
/// `(1−ρ)·mean_t[−A_t log π(a_t|s_t) − β H(π(·|s_t)) + c_v (R_t − V(s_t))²]
///  + ρ·mean_replay[−Σ_a μ(a) log π(a|s)] + penalty(θ)`
pub fn a2c_loss(
    batch: &[Rollout],
    targets: &Targets,
    ac: &ActorCritic,
    head: &dyn OutputHead,
    replay: &[ReplaySample],
    replay_weight: f64,
    penalty: Option<(f64, GradBundle)>,
) -> Result<(LossTerms, GradBundle, GradBundle)> {
    let mut g_pol = ac.policy.zeros_like();
    let mut g_val = ac.value.zeros_like();
    let mut terms = LossTerms::default();
    let n: usize = batch.iter().map(|r| r.steps.len()).sum();
    if n == 0 {
        return Err(Error::Data("empty rollout batch".into()));
    }
    let on_w = if replay.is_empty() { 1.0 } else { 1.0 - replay_weight };
    let scale = on_w / n as f64;
    let beta = ac.cfg.entropy_coef;
    let cv = ac.cfg.value_coef;
    for (ri, r) in batch.iter().enumerate() {
        for (si, s) in r.steps.iter().enumerate() {
            let adv = targets.advantages[ri][si];
            let ret = targets.returns[ri][si];
            let (out, pcache) = net_forward(&ac.policy, &s.input)?;
            let (logits, hcache) = head.logits(&out)?;
            let probs = softmax_masked(&logits, &r.active)?;
            let logp = probs[s.action].max(numerics::PROB_FLOOR).ln();
            let ent = numerics::entropy(&probs);
            terms.policy += -adv * logp * scale;
            terms.entropy += ent / n as f64;
            let gl: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    if p == 0.0 {
                        return 0.0;
                    }
                    let onehot = if i == s.action { 1.0 } else { 0.0 };
                    scale * (adv * (p - onehot) + beta * p * (p.ln() + ent))
                })
                .collect();
            let gout = head.out_grad(&out, hcache.as_ref(), &gl)?;
            net_backward_acc(&ac.policy, &pcache, &gout, &mut g_pol)?;

            let (v, vcache) = net_forward(&ac.value, &s.input)?;
            let err = ret - v[0];
            terms.value += cv * err * err * scale;
            net_backward_acc(&ac.value, &vcache, &[-2.0 * cv * err * scale], &mut g_val)?;
        }
    }
    terms.total = terms.policy + terms.value - beta * terms.entropy * on_w;
    if !replay.is_empty() {
        let bscale = replay_weight / replay.len() as f64;
        for rs in replay {
            let (out, pcache) = net_forward(&ac.policy, &rs.input)?;
            let (logits, hcache) = head.logits(&out)?;
            let probs = softmax_masked(&logits, &rs.active)?;
            let mut ce = 0.0;
            for (p, &mu) in probs.iter().zip(&rs.probs) {
                if mu > 0.0 {
                    ce -= mu * p.max(numerics::PROB_FLOOR).ln();
                }
            }
            terms.bc += ce * bscale;
            let mass: f64 = rs.probs.iter().zip(&rs.active).filter(|(_, &a)| a).map(|(m, _)| m).sum();
            let gl: Vec<f64> = probs
                .iter()
                .zip(&rs.probs)
                .zip(&rs.active)
                .map(|((&p, &mu), &a)| if a { bscale * (mass * p - mu) } else { 0.0 })
                .collect();
            let gout = head.out_grad(&out, hcache.as_ref(), &gl)?;
            net_backward_acc(&ac.policy, &pcache, &gout, &mut g_pol)?;
        }
        terms.total += terms.bc;
    }
    if let Some((pv, pg)) = penalty {
        terms.penalty = pv;
        terms.total += pv;
        g_pol.add_assign(&pg);
    }
    if !terms.total.is_finite() {
        return Err(Error::NumericFault("nonfinite actor-critic loss".into()));
    }
    Ok((terms, g_pol, g_val))
}

/// One optimizer step on policy and value parameters. The head (and any
/// decoder behind it) is only read.
pub fn a2c_update(
    batch: &[Rollout],
    ac: &mut ActorCritic,
    head: &dyn OutputHead,
    reg: &mut dyn Regularizer,
) -> Result<LossTerms> {
    let targets = compute_targets(batch, ac)?;
    let n: usize = batch.iter().map(|r| r.steps.len()).sum();
    let weight = reg.replay_weight();
    let replay = if weight > 0.0 { reg.replay_batch(n) } else { Vec::new() };
    let penalty = reg.penalty(&ac.policy);
    #[cfg(debug_assertions)]
    let digest = head.frozen_digest();
    let (terms, g_pol, g_val) = a2c_loss(batch, &targets, ac, head, &replay, weight, penalty)?;
    numerics::opt_step(&mut ac.policy, &g_pol, &mut ac.policy_opt)?;
    numerics::opt_step(&mut ac.value, &g_val, &mut ac.value_opt)?;
    #[cfg(debug_assertions)]
    debug_assert_eq!(digest, head.frozen_digest(), "actor-critic update touched the encoder-decoder");
    Ok(terms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub global_step: u64,
    pub task_index: usize,
    /// Mean raw return of episodes finished since the previous record.
    pub episode_return: Option<f64>,
    pub episodes: usize,
    pub total_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub penalty: f64,
    pub bc_loss: f64,
}

/// Callbacks from the training loop.
pub trait TrainHooks {
    fn on_log(&mut self, record: LogRecord) -> Result<()>;
    /// Called whenever the task-local step count crosses a multiple of the
    /// evaluation interval (but not at the end of the budget).
    fn on_interval(&mut self, task_step: u64, ac: &ActorCritic, head: &dyn OutputHead) -> Result<()>;
    fn interval(&self) -> u64;
}

/// Hooks that ignore everything.
pub struct SilentHooks;

impl TrainHooks for SilentHooks {
    fn on_log(&mut self, _record: LogRecord) -> Result<()> {
        Ok(())
    }
    fn on_interval(&mut self, _: u64, _: &ActorCritic, _: &dyn OutputHead) -> Result<()> {
        Ok(())
    }
    fn interval(&self) -> u64 {
        u64::MAX
    }
}

struct EnvSlot {
    state: envs::GridState,
    obs: Vec<f64>,
    ctx: EpisodeContext,
    ret: f64,
}

/// Streams used by the training loop.
pub struct TrainStreams {
    pub sampling: Rng,
    pub env_seed: u64,
}

/// Trains for `budget` environment steps on `task`.
#[allow(clippy::too_many_arguments)]
pub fn train_a2c(
    ac: &mut ActorCritic,
    head: &dyn OutputHead,
    task: &TaskSpec,
    budget: u64,
    global_offset: u64,
    streams: &mut TrainStreams,
    reg: &mut dyn Regularizer,
    hooks: &mut dyn TrainHooks,
) -> Result<()> {
    if budget == 0 {
        return Ok(());
    }
    let active = task.space.mask.clone();
    let mut episode = 0u64;
    let reset = |episode: &mut u64| -> Result<EnvSlot> {
        let seed = rng::derive_seed(streams.env_seed, "episode", *episode);
        *episode += 1;
        let (state, obs) = envs::env_reset(task, seed)?;
        Ok(EnvSlot { state, obs, ctx: EpisodeContext::new(head.feature_len()), ret: 0.0 })
    };
    let mut slots = (0..ac.cfg.num_envs)
        .map(|_| reset(&mut episode))
        .collect::<Result<Vec<_>>>()?;
    let interval = hooks.interval().max(1);
    let mut steps = 0u64;
    let mut updates = 0usize;
    let mut finished: Vec<f64> = Vec::new();
    let mut acc = LossTerms::default();
    let mut acc_n = 0usize;
    while steps < budget {
        let mut batch = Vec::with_capacity(slots.len());
        for slot in slots.iter_mut() {
            let mut roll = Vec::with_capacity(ac.cfg.rollout_len);
            for _ in 0..ac.cfg.rollout_len {
                if steps >= budget {
                    break;
                }
                let input = ac.input(&slot.obs, &slot.ctx);
                let a = act(ac, head, &input, &active, ActMode::Sample, &mut streams.sampling)?;
                reg.observe(&input, &active, a.index, &a.probs);
                let out = envs::env_step(&slot.state, a.index, task)?;
                slot.ret += out.reward;
                roll.push(Step { input, action: a.index, reward: out.reward, done: out.done });
                steps += 1;
                let crossed = steps.is_multiple_of(interval) && steps < budget;
                if out.done {
                    finished.push(slot.ret);
                    let fresh = reset(&mut episode)?;
                    *slot = fresh;
                } else {
                    slot.ctx = EpisodeContext { prev_feature: head.feature(&a.output, a.index), prev_reward: out.reward };
                    slot.state = out.state;
                    slot.obs = out.observation;
                }
                if crossed {
                    hooks.on_interval(steps, ac, head)?;
                }
                if out.done {
                    break;
                }
            }
            if roll.is_empty() {
                continue;
            }
            let bootstrap = ac.input(&slot.obs, &slot.ctx);
            batch.push(Rollout { steps: roll, bootstrap, active: active.clone() });
        }
        if batch.is_empty() {
            break;
        }
        let terms = a2c_update(&batch, ac, head, reg)?;
        updates += 1;
        acc.total += terms.total;
        acc.policy += terms.policy;
        acc.value += terms.value;
        acc.entropy += terms.entropy;
        acc.penalty += terms.penalty;
        acc.bc += terms.bc;
        acc_n += 1;
        if updates.is_multiple_of(ac.cfg.log_every.max(1)) || steps >= budget {
            let k = acc_n as f64;
            hooks.on_log(LogRecord {
                global_step: global_offset + steps,
                task_index: task.index,
                episode_return: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
                episodes: finished.len(),
                total_loss: acc.total / k,
                policy_loss: acc.policy / k,
                value_loss: acc.value / k,
                entropy: acc.entropy / k,
                penalty: acc.penalty / k,
                bc_loss: acc.bc / k,
            })?;
            finished.clear();
            acc = LossTerms::default();
            acc_n = 0;
        }
    }
    Ok(())
}

/// Chooses actions during evaluation episodes.
pub trait EpisodePolicy {
    fn begin_episode(&mut self) {}
    fn choose(&mut self, state: &envs::GridState, observation: &[f64]) -> Result<usize>;
    /// Reward received for the action just chosen.
    fn record(&mut self, _reward: f64) {}
}

/// Mean normalized return of `policy` over `episodes` seeded episodes.
pub fn evaluate_episodes(task: &TaskSpec, episodes: usize, seed: u64, policy: &mut dyn EpisodePolicy) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    for ep in 0..episodes {
        let (mut state, mut obs) = envs::env_reset(task, rng::derive_seed(seed, "eval-episode", ep as u64))?;
        policy.begin_episode();
        let mut ret = 0.0;
        while !state.done {
            let action = policy.choose(&state, &obs)?;
            let out = envs::env_step(&state, action, task)?;
            ret += out.reward;
            policy.record(out.reward);
            state = out.state;
            obs = out.observation;
        }
        total += envs::normalize_return(ret, RETURN_RANGE.0, RETURN_RANGE.1)?;
    }
    Ok(total / episodes as f64)
}

struct SampledPolicy<'a> {
    ac: &'a ActorCritic,
    head: &'a dyn OutputHead,
    usable: Vec<bool>,
    options: Vec<usize>,
    sampler: Rng,
    ctx: EpisodeContext,
}

impl EpisodePolicy for SampledPolicy<'_> {
    fn begin_episode(&mut self) {
        self.ctx = EpisodeContext::new(self.head.feature_len());
    }

    fn choose(&mut self, _state: &envs::GridState, obs: &[f64]) -> Result<usize> {
        let (action, feature) = if self.usable.iter().any(|&u| u) {
            let input = self.ac.input(obs, &self.ctx);
            let a = act(self.ac, self.head, &input, &self.usable, ActMode::Sample, &mut self.sampler)?;
            let f = self.head.feature(&a.output, a.index);
            (a.index, f)
        } else {
            let a = self.options[self.sampler.gen_range(0..self.options.len())];
            (a, vec![0.0; self.head.feature_len()])
        };
        self.ctx.prev_feature = feature;
        Ok(action)
    }

    fn record(&mut self, reward: f64) {
        self.ctx.prev_reward = reward;
    }
}

/// Mean normalized return over seeded episodes in sample mode.
///
/// Actions the head cannot score are dropped from the task's mask; if nothing
/// is left the agent acts uniformly at random over the task's actions.
pub fn evaluate_policy(
    ac: &ActorCritic,
    head: &dyn OutputHead,
    task: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let support = head.support();
    let mut policy = SampledPolicy {
        ac,
        head,
        usable: task.space.mask.iter().zip(&support).map(|(&a, &s)| a && s).collect(),
        options: task.space.indices().collect(),
        sampler: rng::substream(seed, "eval-sampling", task.index as u64),
        ctx: EpisodeContext::new(head.feature_len()),
    };
    evaluate_episodes(task, episodes, seed, &mut policy)
}

/// Exploration that follows the current agent on the actions it knows and
/// acts uniformly otherwise (or with probability `epsilon`).
pub struct PreviousPolicyExploration<'a> {
    pub ac: &'a ActorCritic,
    pub encdec: &'a EncoderDecoder,
    pub epsilon: f64,
    pub rng: Rng,
    ctx: EpisodeContext,
}

impl<'a> PreviousPolicyExploration<'a> {
    pub fn new(ac: &'a ActorCritic, encdec: &'a EncoderDecoder, epsilon: f64, rng: Rng) -> Self {
        Self { ac, encdec, epsilon, rng, ctx: EpisodeContext::new(encdec.dim()) }
    }
}

impl ExplorationPolicy for PreviousPolicyExploration<'_> {
    fn choose(&mut self, observation: &[f64], space: &ActionSpace) -> usize {
        let usable: Vec<bool> = space.mask.iter().zip(&self.encdec.seen).map(|(&a, &s)| a && s).collect();
        let known = usable.iter().any(|&u| u);
        if known && self.rng.gen::<f64>() >= self.epsilon {
            let head = DecoderHead { encdec: self.encdec };
            let input = self.ac.input(observation, &self.ctx);
            if let Ok(a) = act(self.ac, &head, &input, &usable, ActMode::Sample, &mut self.rng) {
                self.ctx.prev_feature = a.output;
                return a.index;
            }
        }
        let options: Vec<usize> = space.indices().collect();
        options[self.rng.gen_range(0..options.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationKind {
    Random,
    PreviousPolicy,
}

/// Settings of the representation agent beyond the two sub-configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AaclConfig {
    pub exploration_steps: usize,
    pub exploration: ExplorationKind,
    /// Anchor coefficient λ for fine-tuning on later tasks.
    pub lambda: f64,
    /// Chosen by the method tag rather than configured directly.
    #[serde(skip)]
    pub anchor_target: AnchorTarget,
}

impl Default for AaclConfig {
    fn default() -> Self {
        Self {
            exploration_steps: 10_000,
            exploration: ExplorationKind::Random,
            lambda: 2e4,
            anchor_target: AnchorTarget::Decoder,
        }
    }
}

/// Representation agent: encoder-decoder plus actor-critic over representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaclAgent {
    pub encdec: EncoderDecoder,
    pub ac: ActorCritic,
    pub repr: ReprConfig,
    pub cfg: AaclConfig,
    pub seed: u64,
    pub tasks_done: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_index: usize,
    pub ssl: Option<LossTrace>,
    pub exploration_transitions: usize,
    pub anchors: usize,
}

impl AaclAgent {
    pub fn new(obs_len: usize, catalog_len: usize, repr: ReprConfig, a2c: A2CConfig, cfg: AaclConfig, seed: u64) -> Self {
        let mut init = rng::substream(seed, "encdec-init", 0);
        let encdec = EncoderDecoder::new(obs_len, catalog_len, &repr, &mut init);
        let mut pinit = rng::substream(seed, "policy-init", 0);
        let ac = ActorCritic::new(obs_len, repr.dim, repr.dim, Activation::Sigmoid, &a2c, &mut pinit);
        Self { encdec, ac, repr, cfg, seed, tasks_done: 0 }
    }

    pub fn head(&self) -> DecoderHead<'_> {
        DecoderHead { encdec: &self.encdec }
    }

    /// Exploration and representation stage: collect transitions, adapt the
    /// decoder, train (first task) or fine-tune (later tasks), then record
    /// the task's anchor.
    pub fn prepare_task(&mut self, task: &TaskSpec) -> Result<TaskReport> {
        if task.index != self.tasks_done + 1 || self.encdec.anchors.len() != self.tasks_done {
            return Err(Error::Internal(format!(
                "task {} arrives after {} completed tasks with {} anchors",
                task.index,
                self.tasks_done,
                self.encdec.anchors.len()
            )));
        }
        let idx = task.index as u64;
        let buffer = {
            let erng = rng::substream(self.seed, "exploration", idx);
            let mut policy: Box<dyn ExplorationPolicy + '_> = match self.cfg.exploration {
                ExplorationKind::Random => Box::new(UniformExploration::new(erng)),
                ExplorationKind::PreviousPolicy => {
                    Box::new(PreviousPolicyExploration::new(&self.ac, &self.encdec, 0.5, erng))
                }
            };
            collect_transitions(
                task,
                policy.as_mut(),
                self.cfg.exploration_steps,
                rng::derive_seed(self.seed, "exploration-env", idx),
            )?
        };
        let mut grow = rng::substream(self.seed, "decoder-grow", idx);
        adapt_structure(&mut self.encdec, &task.space, &mut grow)?;
        let mut srng = rng::substream(self.seed, "ssl", idx);
        let active = &task.space.mask;
        let trace = if self.encdec.anchors.is_empty() {
            ssl_train(&buffer, &mut self.encdec, active, &self.repr, &mut srng)?
        } else {
            finetune(&buffer, &mut self.encdec, active, self.cfg.lambda, self.cfg.anchor_target, &self.repr, &mut srng)?
        };
        let with_encoder = matches!(self.cfg.anchor_target, AnchorTarget::Encoder | AnchorTarget::Both);
        let anchor = make_anchor(&buffer, &self.encdec, active, with_encoder)?;
        self.encdec.anchors.push(anchor);
        self.tasks_done += 1;
        Ok(TaskReport {
            task_index: task.index,
            ssl: Some(trace),
            exploration_transitions: buffer.len(),
            anchors: self.encdec.anchors.len(),
        })
    }

    /// Full per-task loop: representation stage, then policy training through
    /// the frozen decoder for the task's budget.
    pub fn run_task(&mut self, task: &TaskSpec, global_offset: u64, hooks: &mut dyn TrainHooks) -> Result<TaskReport> {
        let report = self.prepare_task(task)?;
        let mut streams = TrainStreams {
            sampling: rng::substream(self.seed, "sampling", task.index as u64),
            env_seed: rng::derive_seed(self.seed, "env", task.index as u64),
        };
        let Self { encdec, ac, .. } = self;
        let head = DecoderHead { encdec };
        train_a2c(ac, &head, task, task.train_steps, global_offset, &mut streams, &mut NoRegularizer, hooks)?;
        Ok(report)
    }

    pub fn evaluate(&self, task: &TaskSpec, episodes: usize, seed: u64) -> Result<f64> {
        evaluate_policy(&self.ac, &self.head(), task, episodes, seed)
    }
}
