//! Sequential DQN training with a single TD target shared by all three heads.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{ComposedAction, HeadLosses, NetError, NetOptimizer, QdpNetwork, TrainBatch};
use crate::nn::Tensor;
use crate::perception::{Mask, MASK_THRESHOLD};

#[derive(Debug, Error)]
pub enum SdqnError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    BufferUnderfull { have: usize, need: usize },
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Observations are stored as 8-bit intensities (the environment only renders
/// multiples of 1/255, so this is lossless).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<u8>,
    pub action: ComposedAction,
    pub reward: f64,
    pub next_obs: Vec<u8>,
    pub done: bool,
}

/// FIFO replay memory. Appends come from a single owner; rollout workers hand
/// their transitions to that owner in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends a transition, evicting the oldest when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample of distinct transitions.
    pub fn sample(&mut self, batch: usize) -> Result<Vec<&Transition>, SdqnError> {
        if batch > self.items.len() || batch == 0 {
            return Err(SdqnError::BufferUnderfull {
                have: self.items.len(),
                need: batch.max(1),
            });
        }
        let idx = sample_indices(&mut self.rng, self.items.len(), batch);
        Ok(idx.iter().map(|i| &self.items[i]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonMode {
    /// ε drops by `eps_decay` after every episode.
    PerEpisode,
    /// ε drops by `eps_decay` after every environment step.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Environment steps between hard target-network copies.
    pub target_sync_period: usize,
    /// Transitions collected before the first gradient step.
    pub warmup: usize,
    pub eps_start: f64,
    pub eps_decay: f64,
    pub eps_floor: f64,
    pub eps_mode: EpsilonMode,
    pub total_env_steps: usize,
    pub huber_delta: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            lr: 1e-4,
            batch_size: 16,
            buffer_capacity: 40_000,
            target_sync_period: 500,
            warmup: 1000,
            eps_start: 1.0,
            eps_decay: 0.001,
            eps_floor: 0.01,
            eps_mode: EpsilonMode::PerEpisode,
            total_env_steps: 40_000,
            huber_delta: 1.0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SdqnError> {
        let bad = |m: &str| Err(SdqnError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size must be >= 1 and <= buffer_capacity");
        }
        if self.target_sync_period == 0 {
            return bad("target_sync_period must be >= 1");
        }
        if !(self.eps_floor >= 0.0 && self.eps_start >= self.eps_floor && self.eps_start <= 1.0) {
            return bad("need 0 <= eps_floor <= eps_start <= 1");
        }
        if !(self.eps_decay >= 0.0) {
            return bad("eps_decay must be >= 0");
        }
        if !(self.huber_delta > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("huber_delta must be > 0 and grad_clip >= 0");
        }
        Ok(())
    }

    /// ε for the given episode index and global environment step.
    pub fn epsilon(&self, episode: usize, env_step: usize) -> f64 {
        let n = match self.eps_mode {
            EpsilonMode::PerEpisode => episode,
            EpsilonMode::PerStep => env_step,
        };
        (self.eps_start - self.eps_decay * n as f64).max(self.eps_floor)
    }
}

/// Per-episode schedule with the default constants: `max(1 - 0.001 k, 0.01)`.
pub fn epsilon_schedule(episode: usize) -> f64 {
    TrainConfig::default().epsilon(episode, 0)
}

pub fn decode_obs(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes.iter().map(|&b| b as f32 / 255.0)
}

fn obs_tensor(obs: &[&[u8]], d: usize) -> Result<Tensor<f32>, SdqnError> {
    let mut data = Vec::with_capacity(obs.len() * d * d);
    for o in obs {
        if o.len() != d * d {
            return Err(SdqnError::InvalidTransition(format!(
                "observation has {} pixels, expected {}",
                o.len(),
                d * d
            )));
        }
        data.extend(decode_obs(o));
    }
    Ok(Tensor {
        shape: vec![obs.len(), 1, d, d],
        data,
    })
}

fn mask_of(obs: &[u8], d: usize) -> Mask {
    Mask {
        size: d,
        data: decode_obs(obs).map(|v| v > MASK_THRESHOLD).collect(),
    }
}

/// `y = r + γ Q3_target(s', greedy sub-actions)`, or `y = r` for terminal transitions.
/// Selection and evaluation both use `target`.
pub fn td_target(target: &QdpNetwork<f32>, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>, SdqnError> {
    let d = target.config.image_size;
    let live: Vec<&Transition> = batch.iter().copied().filter(|t| !t.done).collect();
    let mut next_q = Vec::new();
    if gamma != 0.0 && !live.is_empty() {
        let x = obs_tensor(&live.iter().map(|t| t.next_obs.as_slice()).collect::<Vec<_>>(), d)?;
        let masks: Vec<Mask> = live.iter().map(|t| mask_of(&t.next_obs, d)).collect();
        next_q = target.greedy(&x, &masks)?.into_iter().map(|c| c.q3).collect();
    }
    let mut live_q = next_q.into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            if t.done {
                t.reward
            } else {
                t.reward + gamma * live_q.next().unwrap_or(0.0)
            }
        })
        .collect())
}

fn train_batch(batch: &[&Transition], d: usize) -> Result<TrainBatch<f32>, SdqnError> {
    for t in batch {
        if !t.action.valid {
            return Err(SdqnError::InvalidTransition("no-op action in replay".into()));
        }
    }
    Ok(TrainBatch {
        obs: obs_tensor(&batch.iter().map(|t| t.obs.as_slice()).collect::<Vec<_>>(), d)?,
        picks: batch.iter().map(|t| t.action.pick).collect(),
        places: batch.iter().map(|t| t.action.place).collect(),
        thetas: batch.iter().map(|t| t.action.theta).collect(),
    })
}

/// Sum over heads of the batch-mean Huber loss against the shared targets.
pub fn loss_all_heads(
    net: &QdpNetwork<f32>,
    batch: &[&Transition],
    y: &[f64],
    delta: f64,
) -> Result<HeadLosses, SdqnError> {
    let b = train_batch(batch, net.config.image_size)?;
    Ok(net.head_losses(&b, y, delta)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub loss: f64,
    pub y_mean: f64,
    pub grad_norm: f64,
}

/// One optimization step on a minibatch drawn from `buffer`.
pub fn train_step(
    net: &mut QdpNetwork<f32>,
    target: &QdpNetwork<f32>,
    buffer: &mut ReplayBuffer,
    opt: &mut NetOptimizer,
    cfg: &TrainConfig,
) -> Result<TrainMetrics, SdqnError> {
    let d = net.config.image_size;
    let batch = buffer.sample(cfg.batch_size)?;
    let y = td_target(target, &batch, cfg.gamma)?;
    let tb = train_batch(&batch, d)?;
    let (losses, mut grads) = net.loss_and_grads(&tb, &y, cfg.huber_delta)?;
    let grad_norm = grads.norm();
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        grads.scale(cfg.grad_clip / grad_norm);
    }
    opt.step(net, &grads)?;
    Ok(TrainMetrics {
        loss: losses.total,
        y_mean: y.iter().sum::<f64>() / y.len() as f64,
        grad_norm,
    })
}

/// Hard copy of the online parameters into the target network.
pub fn sync_target(net: &QdpNetwork<f32>, target: &mut QdpNetwork<f32>) {
    target.copy_params_from(net);
}

/// Enumerable MDP whose actions factor into three sub-actions.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyMdp {
    pub n_states: usize,
    pub factors: [usize; 3],
    /// `next[s][a]` lists `(s', probability)`; `a` is the flat index of `(a1, a2, a3)`.
    pub next: Vec<Vec<Vec<(usize, f64)>>>,
    /// Expected reward `r[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl TinyMdp {
    pub fn n_actions(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn flat(&self, a: [usize; 3]) -> usize {
        (a[0] * self.factors[1] + a[1]) * self.factors[2] + a[2]
    }

    /// Exact optimal Q over flat actions.
    pub fn value_iteration(&self, tol: f64) -> Vec<Vec<f64>> {
        let na = self.n_actions();
        let mut q = vec![vec![0.0; na]; self.n_states];
        loop {
            let v: Vec<f64> = q.iter().map(|row| row.iter().cloned().fold(f64::MIN, f64::max)).collect();
            let mut delta: f64 = 0.0;
            for s in 0..self.n_states {
                for a in 0..na {
                    let new = self.reward[s][a] + self.gamma * self.next[s][a].iter().map(|&(sp, p)| p * v[sp]).sum::<f64>();
                    delta = delta.max((new - q[s][a]).abs());
                    q[s][a] = new;
                }
            }
            if delta < tol {
                return q;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularSdqn {
    pub factors: [usize; 3],
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub q3: Vec<Vec<f64>>,
}

impl TabularSdqn {
    fn idx2(&self, a1: usize, a2: usize) -> usize {
        a1 * self.factors[1] + a2
    }

    fn idx3(&self, a: [usize; 3]) -> usize {
        (a[0] * self.factors[1] + a[1]) * self.factors[2] + a[2]
    }

    fn argmax(values: impl Iterator<Item = f64>) -> usize {
        let mut best = (0, f64::MIN);
        for (i, v) in values.enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    }

    /// Greedy sequential sub-actions in state `s`.
    pub fn greedy(&self, s: usize) -> [usize; 3] {
        let [_, n2, n3] = self.factors;
        let a1 = Self::argmax(self.q1[s].iter().copied());
        let a2 = Self::argmax((0..n2).map(|a2| self.q2[s][self.idx2(a1, a2)]));
        let a3 = Self::argmax((0..n3).map(|a3| self.q3[s][self.idx3([a1, a2, a3])]));
        [a1, a2, a3]
    }

    pub fn q3_at(&self, s: usize, a: [usize; 3]) -> f64 {
        self.q3[s][self.idx3(a)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            iterations: 60_000,
            alpha: 0.1,
            seed: 0,
        }
    }
}

/// Shared-target SDQN with lookup tables. States are drawn uniformly; each
/// sub-action is ε-greedy given the earlier ones. ε is 1 for the first half of
/// training, 0.1 for the next quarter and 0 for the last quarter, so the
/// intermediate heads settle on the values of greedy continuations.
pub fn tabular_sdqn_oracle(mdp: &TinyMdp, cfg: &TabularConfig) -> TabularSdqn {
    let [n1, n2, n3] = mdp.factors;
    let mut t = TabularSdqn {
        factors: mdp.factors,
        q1: vec![vec![0.0; n1]; mdp.n_states],
        q2: vec![vec![0.0; n1 * n2]; mdp.n_states],
        q3: vec![vec![0.0; n1 * n2 * n3]; mdp.n_states],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for it in 0..cfg.iterations {
        let eps = if it < cfg.iterations / 2 {
            1.0
        } else if it < cfg.iterations * 3 / 4 {
            0.1
        } else {
            0.0
        };
        let s = rng.gen_range(0..mdp.n_states);
        let g = t.greedy(s);
        let a1 = if rng.gen::<f64>() < eps { rng.gen_range(0..n1) } else { g[0] };
        let a2 = if rng.gen::<f64>() < eps {
            rng.gen_range(0..n2)
        } else {
            TabularSdqn::argmax((0..n2).map(|x| t.q2[s][t.idx2(a1, x)]))
        };
        let a3 = if rng.gen::<f64>() < eps {
            rng.gen_range(0..n3)
        } else {
            TabularSdqn::argmax((0..n3).map(|x| t.q3[s][t.idx3([a1, a2, x])]))
        };
        let a = [a1, a2, a3];
        let flat = mdp.flat(a);
        // Expected over next states, so stochastic transitions add no target noise.
        let next_value: f64 = mdp.next[s][flat].iter().map(|&(sp, p)| p * t.q3_at(sp, t.greedy(sp))).sum();
        let y = mdp.reward[s][flat] + mdp.gamma * next_value;
        let (i2, i3) = (t.idx2(a1, a2), t.idx3(a));
        t.q1[s][a1] += cfg.alpha * (y - t.q1[s][a1]);
        t.q2[s][i2] += cfg.alpha * (y - t.q2[s][i2]);
        t.q3[s][i3] += cfg.alpha * (y - t.q3[s][i3]);
    }
    t
}
