//! Comparison agents acting directly on logits over the full action catalog.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agent::{
    self, act, train_a2c, A2CConfig, ActMode, Action, ActorCritic, OutputHead, Regularizer, ReplaySample,
    TrainHooks, TrainStreams,
};
use crate::envs::TaskSpec;
use crate::error::{Error, Result};
use crate::numerics::{net_backward_acc, net_forward, softmax_masked, Activation, ForwardCache, GradBundle, ParamBundle};
use crate::rng::{self, Rng};

/// Identity head: the policy network emits one logit per catalog action.
pub struct DirectHead {
    pub catalog_len: usize,
}

impl OutputHead for DirectHead {
    fn logits(&self, out: &[f64]) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        if out.len() != self.catalog_len {
            return Err(Error::Shape(format!("expected {} logits, got {}", self.catalog_len, out.len())));
        }
        Ok((out.to_vec(), None))
    }

    fn out_grad(&self, _out: &[f64], _cache: Option<&ForwardCache>, grad_logits: &[f64]) -> Result<Vec<f64>> {
        Ok(grad_logits.to_vec())
    }

    fn support(&self) -> Vec<bool> {
        vec![true; self.catalog_len]
    }

    fn feature(&self, _out: &[f64], action: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.catalog_len];
        f[action] = 1.0;
        f
    }

    fn feature_len(&self) -> usize {
        self.catalog_len
    }

    fn out_activation(&self) -> Activation {
        Activation::Linear
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Ind,
    Ft,
    Ewc,
    OnlineEwc,
    ReplayBc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// λ_b for EWC and online-EWC.
    pub ewc_lambda: f64,
    pub online_decay: f64,
    /// Weight of the behaviour-cloning term; the on-policy term gets the rest.
    pub replay_ratio: f64,
    pub replay_capacity: usize,
    /// Most recent on-policy steps kept for the Fisher estimate.
    pub fisher_samples: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ewc_lambda: 1e4,
            online_decay: 0.95,
            replay_ratio: 0.5,
            replay_capacity: 50_000,
            fisher_samples: 2_000,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ewc_lambda < 0.0 {
            return Err(Error::Config("ewc_lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.online_decay) {
            return Err(Error::Config("online_decay must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.replay_ratio) {
            return Err(Error::Config("replay_ratio must be in [0, 1)".into()));
        }
        if self.replay_capacity == 0 || self.fisher_samples == 0 {
            return Err(Error::Config("replay_capacity and fisher_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity uniform sample of a stream (Algorithm R).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservoir<T> {
    pub capacity: usize,
    pub seen: u64,
    pub items: Vec<T>,
}

impl<T: Clone> Reservoir<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, seen: 0, items: Vec::new() }
    }

    pub fn insert(&mut self, item: T, rng: &mut Rng) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
            }
        }
    }

    /// `n` items drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.items[rng.gen_range(0..self.items.len())].clone()).collect()
    }
}

/// Parameters and diagonal Fisher a quadratic penalty pulls towards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcAnchor {
    pub params: ParamBundle,
    pub fisher: GradBundle,
}

/// `(λ/2) Σ_j Σ_k F_k^j (θ_k − θ_k^j)²` and its gradient.
pub fn ewc_penalty(policy: &ParamBundle, anchors: &[EwcAnchor], lambda: f64) -> (f64, GradBundle) {
    let mut grad = policy.zeros_like();
    let mut value = 0.0;
    for anchor in anchors {
        for (((g, &p), &a), &f) in grad
            .values_mut()
            .zip(policy.values())
            .zip(anchor.params.values())
            .zip(anchor.fisher.values())
        {
            let d = p - a;
            value += 0.5 * lambda * f * d * d;
            *g += lambda * f * d;
        }
    }
    (value, grad)
}

/// Policy input, mask and the action taken, kept for the Fisher estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherSample {
    pub input: Vec<f64>,
    pub active: Vec<bool>,
    pub action: usize,
}

/// Mean squared gradient of `log π(a|s)` over recorded on-policy samples.
pub fn empirical_fisher(ac: &ActorCritic, head: &DirectHead, samples: &[FisherSample]) -> Result<GradBundle> {
    let mut fisher = ac.policy.zeros_like();
    if samples.is_empty() {
        return Ok(fisher);
    }
    for s in samples {
        let (out, cache) = net_forward(&ac.policy, &s.input)?;
        let (logits, _) = head.logits(&out)?;
        let probs = softmax_masked(&logits, &s.active)?;
        let upstream: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| if i == s.action { 1.0 - p } else { -p })
            .zip(&s.active)
            .map(|(g, &a)| if a { g } else { 0.0 })
            .collect();
        let mut g = ac.policy.zeros_like();
        net_backward_acc(&ac.policy, &cache, &upstream, &mut g)?;
        for (f, v) in fisher.values_mut().zip(g.values()) {
            *f += v * v;
        }
    }
    fisher.scale(1.0 / samples.len() as f64);
    Ok(fisher)
}

/// Direct-logit agent for one of the comparison methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineAgent {
    pub kind: BaselineKind,
    pub ac: ActorCritic,
    pub a2c: A2CConfig,
    pub cfg: BaselineConfig,
    pub catalog_len: usize,
    pub obs_len: usize,
    pub seed: u64,
    pub tasks_done: usize,
    pub anchors: Vec<EwcAnchor>,
    pub reservoir: Reservoir<ReplaySample>,
    pub recent: VecDeque<FisherSample>,
    /// Number of times the parameters were re-initialized at a task boundary.
    pub reinit_count: usize,
}

struct BaselineReg<'a> {
    kind: BaselineKind,
    cfg: &'a BaselineConfig,
    anchors: &'a [EwcAnchor],
    reservoir: &'a mut Reservoir<ReplaySample>,
    recent: &'a mut VecDeque<FisherSample>,
    insert_rng: &'a mut Rng,
    replay_rng: &'a mut Rng,
}

impl Regularizer for BaselineReg<'_> {
    fn penalty(&self, policy: &ParamBundle) -> Option<(f64, GradBundle)> {
        match self.kind {
            BaselineKind::Ewc | BaselineKind::OnlineEwc => Some(ewc_penalty(policy, self.anchors, self.cfg.ewc_lambda)),
            _ => None,
        }
    }

    fn replay_weight(&self) -> f64 {
        if self.kind == BaselineKind::ReplayBc && !self.reservoir.items.is_empty() {
            self.cfg.replay_ratio
        } else {
            0.0
        }
    }

    fn replay_batch(&mut self, n: usize) -> Vec<ReplaySample> {
        self.reservoir.sample(n, self.replay_rng)
    }

    fn observe(&mut self, input: &[f64], active: &[bool], action: usize, probs: &[f64]) {
        match self.kind {
            BaselineKind::Ewc | BaselineKind::OnlineEwc => {
                if self.recent.len() == self.cfg.fisher_samples {
                    self.recent.pop_front();
                }
                self.recent.push_back(FisherSample { input: input.to_vec(), active: active.to_vec(), action });
            }
            BaselineKind::ReplayBc => {
                let sample = ReplaySample { input: input.to_vec(), active: active.to_vec(), probs: probs.to_vec() };
                self.reservoir.insert(sample, self.insert_rng);
            }
            BaselineKind::Ind | BaselineKind::Ft => {}
        }
    }
}

impl BaselineAgent {
    pub fn new(
        kind: BaselineKind,
        obs_len: usize,
        catalog_len: usize,
        a2c: A2CConfig,
        cfg: BaselineConfig,
        seed: u64,
    ) -> Self {
        let ac = Self::fresh(obs_len, catalog_len, &a2c, seed, 0);
        Self {
            kind,
            ac,
            reservoir: Reservoir::new(cfg.replay_capacity),
            a2c,
            cfg,
            catalog_len,
            obs_len,
            seed,
            tasks_done: 0,
            anchors: Vec::new(),
            recent: VecDeque::new(),
            reinit_count: 0,
        }
    }

    fn fresh(obs_len: usize, catalog_len: usize, a2c: &A2CConfig, seed: u64, index: u64) -> ActorCritic {
        let mut init = rng::substream(seed, "policy-init", index);
        ActorCritic::new(obs_len, catalog_len, catalog_len, Activation::Linear, a2c, &mut init)
    }

    pub fn head(&self) -> DirectHead {
        DirectHead { catalog_len: self.catalog_len }
    }

    pub fn act(&self, input: &[f64], active: &[bool], mode: ActMode, rng: &mut Rng) -> Result<Action> {
        act(&self.ac, &self.head(), input, active, mode, rng)
    }

    pub fn run_task(&mut self, task: &TaskSpec, global_offset: u64, hooks: &mut dyn TrainHooks) -> Result<()> {
        if task.index != self.tasks_done + 1 {
            return Err(Error::Internal(format!("task {} after {} completed", task.index, self.tasks_done)));
        }
        if self.kind == BaselineKind::Ind && self.tasks_done > 0 {
            self.ac = Self::fresh(self.obs_len, self.catalog_len, &self.a2c, self.seed, task.index as u64);
            self.reinit_count += 1;
        }
        let idx = task.index as u64;
        let mut streams = TrainStreams {
            sampling: rng::substream(self.seed, "sampling", idx),
            env_seed: rng::derive_seed(self.seed, "env", idx),
        };
        let mut insert_rng = rng::substream(self.seed, "reservoir", idx);
        let mut replay_rng = rng::substream(self.seed, "replay-sample", idx);
        let head = self.head();
        self.recent.clear();
        {
            let mut reg = BaselineReg {
                kind: self.kind,
                cfg: &self.cfg,
                anchors: &self.anchors,
                reservoir: &mut self.reservoir,
                recent: &mut self.recent,
                insert_rng: &mut insert_rng,
                replay_rng: &mut replay_rng,
            };
            train_a2c(&mut self.ac, &head, task, task.train_steps, global_offset, &mut streams, &mut reg, hooks)?;
        }
        match self.kind {
            BaselineKind::Ewc => {
                let samples: Vec<FisherSample> = self.recent.iter().cloned().collect();
                let fisher = empirical_fisher(&self.ac, &head, &samples)?;
                self.anchors.push(EwcAnchor { params: self.ac.policy.clone(), fisher });
            }
            BaselineKind::OnlineEwc => {
                let samples: Vec<FisherSample> = self.recent.iter().cloned().collect();
                let mut fisher = empirical_fisher(&self.ac, &head, &samples)?;
                if let Some(prev) = self.anchors.pop() {
                    let mut running = prev.fisher;
                    running.scale(self.cfg.online_decay);
                    fisher.add_assign(&running);
                }
                self.anchors.push(EwcAnchor { params: self.ac.policy.clone(), fisher });
            }
            _ => {}
        }
        self.tasks_done += 1;
        Ok(())
    }

    pub fn evaluate(&self, task: &TaskSpec, episodes: usize, seed: u64) -> Result<f64> {
        agent::evaluate_policy(&self.ac, &self.head(), task, episodes, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ActionSpace, Family, GridConfig};
    use crate::numerics;

    fn task(index: usize, k: usize, steps: u64) -> TaskSpec {
        TaskSpec {
            index,
            family: Family::Oriented,
            grid: GridConfig::new(3, 3, Family::Oriented),
            space: ActionSpace::prefix(Family::Oriented.catalog(), k).unwrap(),
            train_steps: steps,
        }
    }

    fn small(kind: BaselineKind, seed: u64) -> BaselineAgent {
        let a2c = A2CConfig { hidden: vec![6], num_envs: 2, rollout_len: 4, ..A2CConfig::default() };
        let cfg = BaselineConfig { fisher_samples: 20, replay_capacity: 30, ..BaselineConfig::default() };
        BaselineAgent::new(kind, task(1, 3, 0).obs_len(), 7, a2c, cfg, seed)
    }

    #[test]
    fn zero_weights_give_uniform_thirds() {
        let mut agent = small(BaselineKind::Ft, 0);
        for v in agent.ac.policy.values_mut() {
            *v = 0.0;
        }
        let input = vec![0.3; agent.ac.policy.in_dim()];
        let mut r = rng::substream(0, "t", 0);
        let a = agent.act(&input, &task(1, 3, 0).space.mask, ActMode::Sample, &mut r).unwrap();
        for p in &a.probs[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(a.probs[3..].iter().all(|&p| p == 0.0));
        assert!(agent.act(&input, &[false; 7], ActMode::Sample, &mut r).is_err());
    }

    #[test]
    fn probabilities_match_hand_softmax() {
        let agent = small(BaselineKind::Ft, 1);
        let input = vec![0.5; agent.ac.policy.in_dim()];
        let (logits, _) = net_forward(&agent.ac.policy, &input).unwrap();
        let mask = task(1, 5, 0).space.mask;
        let mut r = rng::substream(1, "t", 0);
        let a = agent.act(&input, &mask, ActMode::Greedy, &mut r).unwrap();
        let z: f64 = logits[..5].iter().map(|l| l.exp()).sum();
        for i in 0..5 {
            assert!((a.probs[i] - logits[i].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn ewc_penalty_is_zero_at_anchor_and_matches_finite_differences() {
        let agent = small(BaselineKind::Ewc, 2);
        let mut r = rng::substream(2, "fisher", 0);
        let mut fisher = agent.ac.policy.zeros_like();
        for f in fisher.values_mut() {
            *f = r.gen_range(0.0..2.0);
        }
        let anchors = vec![EwcAnchor { params: agent.ac.policy.clone(), fisher }];
        let (v, g) = ewc_penalty(&agent.ac.policy, &anchors, 1e4);
        assert_eq!(v, 0.0);
        assert_eq!(g.norm_sq(), 0.0);
        let mut moved = agent.ac.policy.clone();
        for p in moved.values_mut() {
            *p += r.gen_range(-0.1..0.1);
        }
        let err = numerics::fd_check(|p| ewc_penalty(p, &anchors, 1e4), &moved, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reservoir_keeps_everything_until_full() {
        let mut res = Reservoir::new(5);
        let mut r = rng::substream(3, "t", 0);
        for i in 0..5 {
            res.insert(i, &mut r);
        }
        assert_eq!(res.items, vec![0, 1, 2, 3, 4]);
        for i in 5..100 {
            res.insert(i, &mut r);
        }
        assert_eq!(res.items.len(), 5);
        assert_eq!(res.seen, 100);
    }

    #[test]
    fn ind_reinitializes_at_each_boundary() {
        let mut agent = small(BaselineKind::Ind, 4);
        agent.run_task(&task(1, 3, 40), 0, &mut agent::SilentHooks).unwrap();
        let trained = agent.ac.policy.clone();
        agent.run_task(&task(2, 5, 0), 40, &mut agent::SilentHooks).unwrap();
        assert_eq!(agent.reinit_count, 1);
        assert_ne!(agent.ac.policy, trained);
    }

    #[test]
    fn online_fisher_stays_nonnegative_with_one_anchor() {
        let mut agent = small(BaselineKind::OnlineEwc, 5);
        agent.run_task(&task(1, 3, 40), 0, &mut agent::SilentHooks).unwrap();
        agent.run_task(&task(2, 5, 40), 40, &mut agent::SilentHooks).unwrap();
        assert_eq!(agent.anchors.len(), 1);
        assert!(agent.anchors[0].fisher.values().all(|&f| f >= 0.0));
        let mut ewc = small(BaselineKind::Ewc, 5);
        ewc.run_task(&task(1, 3, 40), 0, &mut agent::SilentHooks).unwrap();
        ewc.run_task(&task(2, 5, 40), 40, &mut agent::SilentHooks).unwrap();
        assert_eq!(ewc.anchors.len(), 2);
    }

    #[test]
    fn replay_fills_reservoir_from_on_policy_steps() {
        let mut agent = small(BaselineKind::ReplayBc, 6);
        agent.run_task(&task(1, 3, 40), 0, &mut agent::SilentHooks).unwrap();
        assert_eq!(agent.reservoir.seen, 40);
        assert_eq!(agent.reservoir.items.len(), 30);
        let s = &agent.reservoir.items[0];
        assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
