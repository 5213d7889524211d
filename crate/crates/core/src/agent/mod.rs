//! Double-DQN policy learner trained on the learned reward, plus the
//! count-based exploration bonus used during pretraining.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Transition;
use crate::diffcore::{forward_backward, Activation, AdamConfig, AdamState, Bound, Graph, Mlp, Module, ParamSet, Real, Var};
use crate::envs::Action;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Steps over which epsilon is annealed linearly.
    pub epsilon_decay: usize,
    /// Global gradient-norm clip for Q updates.
    pub clip_norm: Option<f64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64, 64],
            lr: 5e-4,
            gamma: 0.99,
            batch_size: 64,
            target_sync: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 50_000,
            clip_norm: Some(10.0),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("epsilon {e} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 || self.target_sync == 0 {
            return Err(Error::Config("batch size and target sync interval must be positive".into()));
        }
        Ok(())
    }

    /// Linearly annealed exploration rate after `step` agent steps.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        if step >= self.epsilon_decay {
            return self.epsilon_end;
        }
        let f = step as f64 / self.epsilon_decay.max(1) as f64;
        self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
    }
}

/// Observation to per-action values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QNetwork<T: Real = f32> {
    params: ParamSet<T>,
    pub mlp: Mlp,
}

impl<T: Real> Module<T> for QNetwork<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> QNetwork<T> {
    pub fn new<R: Rng>(obs_dim: usize, actions: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(actions);
        let mlp = Mlp::new(&mut params, "q", &dims, Activation::Silu, Activation::Identity, rng);
        QNetwork { params, mlp }
    }

    pub fn actions(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn cast<U: Real>(&self) -> QNetwork<U> {
        QNetwork { params: self.params.cast(), mlp: self.mlp.clone() }
    }

    /// Q-values `[n, actions]` for row-major observations.
    pub fn q_values(&self, observations: &[T]) -> Result<Vec<T>> {
        let d = self.mlp.in_dim();
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let x = g.constant(vec![observations.len() / d, d], observations.to_vec())?;
        let q = self.mlp.forward(&mut g, &p, x)?;
        Ok(g.value(q).to_vec())
    }
}

/// Lowest index among the maximal values.
pub fn greedy_action<T: Real>(q: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// A batch of transitions in tensor form with the rewards to learn from.
#[derive(Clone, Debug)]
pub struct TdBatch<T> {
    pub obs: Vec<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<T>,
    pub next_obs: Vec<T>,
    pub terminal: Vec<bool>,
}

impl TdBatch<f32> {
    pub fn from_transitions(batch: &[&Transition], rewards: Vec<f32>) -> Result<Self> {
        let mut b = TdBatch { obs: Vec::new(), actions: Vec::new(), rewards, next_obs: Vec::new(), terminal: Vec::new() };
        for t in batch {
            let Action::Discrete(a) = t.action else {
                return Err(Error::Action("the Q-learner needs discrete actions".into()));
            };
            b.obs.extend_from_slice(&t.obs);
            b.next_obs.extend_from_slice(&t.next_obs);
            b.actions.push(a);
            b.terminal.push(t.terminal);
        }
        Ok(b)
    }
}

/// Double-Q bootstrap targets `r + gamma * (1 - done) * Q_target(s', argmax Q_online(s'))`.
pub fn td_targets<T: Real>(online: &QNetwork<T>, target: &QNetwork<T>, batch: &TdBatch<T>, gamma: f64) -> Result<Vec<T>> {
    let n = batch.actions.len();
    let a = online.actions();
    let q_on = online.q_values(&batch.next_obs)?;
    let q_tg = target.q_values(&batch.next_obs)?;
    Ok((0..n)
        .map(|i| {
            if batch.terminal[i] {
                return batch.rewards[i];
            }
            let best = greedy_action(&q_on[i * a..(i + 1) * a]);
            batch.rewards[i] + T::of(gamma) * q_tg[i * a + best]
        })
        .collect())
}

/// Mean squared TD error of the online network against constant targets.
pub fn td_loss_graph<T: Real>(g: &mut Graph<T>, p: &Bound, q: &QNetwork<T>, obs: &[T], actions: &[usize], targets: &[T]) -> Result<Var> {
    let n = actions.len();
    let a = q.actions();
    let x = g.constant(vec![n, q.mlp.in_dim()], obs.to_vec())?;
    let qv = q.mlp.forward(g, p, x)?;
    let mut mask = vec![T::zero(); n * a];
    for (i, &act) in actions.iter().enumerate() {
        mask[i * a + act] = T::one();
    }
    let m = g.constant(vec![n, a], mask)?;
    let sel = g.mul(qv, m)?;
    let sel = g.sum_last(sel);
    let y = g.constant(vec![n], targets.to_vec())?;
    let d = g.sub(sel, y)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Epsilon-greedy Double-DQN agent.
#[derive(Clone, Debug)]
pub struct DqnAgent {
    pub config: AgentConfig,
    pub online: QNetwork<f32>,
    pub target: QNetwork<f32>,
    opt: AdamState<f32>,
    updates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Greedy,
}

impl DqnAgent {
    pub fn new<R: Rng>(config: AgentConfig, obs_dim: usize, actions: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::new(obs_dim, actions, &config.hidden, rng);
        let target = online.clone();
        let mut adam = AdamConfig::with_lr(config.lr);
        adam.clip_norm = config.clip_norm;
        let opt = AdamState::new(online.params(), adam);
        Ok(DqnAgent { config, online, target, opt, updates: 0 })
    }

    pub fn act<R: Rng>(&self, obs: &[f32], mode: ActMode, epsilon: f64, rng: &mut R) -> Result<usize> {
        if mode == ActMode::Explore && rng.gen::<f64>() < epsilon {
            return Ok(rng.gen_range(0..self.online.actions()));
        }
        Ok(greedy_action(&self.online.q_values(obs)?))
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// One gradient step on the TD loss; syncs the target network every
    /// `target_sync` updates. Returns the loss before the step.
    pub fn update(&mut self, batch: &TdBatch<f32>) -> Result<f32> {
        let targets = td_targets(&self.online, &self.target, batch, self.config.gamma)?;
        let q = &self.online;
        let (loss, grads) = forward_backward(q, |g, p| td_loss_graph(g, p, q, &batch.obs, &batch.actions, &targets))?;
        self.opt.step(self.online.params_mut(), &grads)?;
        self.updates += 1;
        if self.updates % self.config.target_sync == 0 {
            self.sync_target();
        }
        Ok(loss)
    }

    pub fn updates(&self) -> usize {
        self.updates
    }
}

/// Visit counts over discretised state keys.
#[derive(Clone, Debug, Default)]
pub struct VisitCounts {
    counts: HashMap<u64, u32>,
}

impl VisitCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, key: u64) -> u32 {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn visit(&mut self, key: u64) {
        *self.counts.entry(key).or_insert(0) += 1;
    }

    /// `1 / sqrt(1 + count)` for the state's current count.
    pub fn bonus(&self, key: u64) -> f32 {
        intrinsic_reward(self.count(key))
    }
}

pub fn intrinsic_reward(count: u32) -> f32 {
    1.0 / (1.0 + count as f32).sqrt()
}
