//! Experience collection, cyclic replay storage, advantages and value targets.
//!
//! Per-iteration arrays are time-major: entry `t * num_envs + e` is step `t`
//! of environment `e`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvBatch, EpisodeEnd};
use crate::error::{Error, Result};
use crate::normalize::RunningNormalizer;
use crate::policy::{ActorCritic, ActorCriticParams, LatentGene};
use crate::tensor::Mat;

pub const ADV_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub agent_id: usize,
    /// Raw (unnormalized) observation.
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    /// `log pi_k(a|s)` under the collecting snapshot.
    pub behavior_log_prob: f64,
    /// `V(s)` with the collector's gene under the collecting snapshot.
    pub behavior_value: f64,
    pub reward: f64,
    pub done: bool,
    /// `done` caused by the step limit.
    #[serde(default)]
    pub truncated: bool,
    /// Raw next observation (the reset state when `done`).
    pub next_obs: Vec<f64>,
    pub iteration_collected: u64,
}

/// Bounded per-agent store; the oldest records are overwritten first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    agent_id: usize,
    capacity: usize,
    storage: Vec<TransitionRecord>,
    write_cursor: usize,
}

impl ReplayBuffer {
    pub fn new(agent_id: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            agent_id,
            capacity,
            storage: Vec::with_capacity(capacity),
            write_cursor: 0,
        }
    }

    /// `chunks * horizon * envs_per_agent`.
    pub fn with_chunks(agent_id: usize, chunks: usize, horizon: usize, envs_per_agent: usize) -> Self {
        Self::new(agent_id, chunks * horizon * envs_per_agent)
    }

    pub fn agent_id(&self) -> usize {
        self.agent_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.storage.len() < self.capacity {
            self.storage.push(record);
        } else {
            self.storage[self.write_cursor] = record;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = TransitionRecord>) {
        for r in records {
            self.push(r);
        }
    }

    /// Physical slot access (slot order, not age order).
    pub fn get(&self, slot: usize) -> &TransitionRecord {
        &self.storage[slot]
    }

    /// Records from oldest to newest.
    pub fn iter_chronological(&self) -> impl Iterator<Item = &TransitionRecord> {
        let split = if self.storage.len() < self.capacity { 0 } else { self.write_cursor };
        self.storage[split..].iter().chain(self.storage[..split].iter())
    }

    /// The newest `n` records, oldest first.
    pub fn latest(&self, n: usize) -> Vec<&TransitionRecord> {
        let all: Vec<_> = self.iter_chronological().collect();
        let start = all.len().saturating_sub(n);
        all[start..].to_vec()
    }

    pub fn clear(&mut self) {
        self.storage.clear();
        self.write_cursor = 0;
    }

    /// Rebuilds a buffer from chronologically ordered records.
    pub fn from_chronological(agent_id: usize, capacity: usize, records: Vec<TransitionRecord>) -> Self {
        let mut b = Self::new(agent_id, capacity);
        b.extend(records);
        b
    }
}

/// One collection pass for one agent.
#[derive(Debug, Clone)]
pub struct CollectedChunk {
    pub agent_id: usize,
    /// Time-major, `horizon * num_envs` records.
    pub records: Vec<TransitionRecord>,
    pub num_envs: usize,
    /// `V(s_T)` for the state after the last step of each environment.
    pub bootstrap_values: Vec<f64>,
    pub episodes: Vec<EpisodeEnd>,
}

impl CollectedChunk {
    /// All raw observations visited, in collection order.
    pub fn raw_obs(&self, obs_dim: usize) -> Mat {
        let data: Vec<f64> = self.records.iter().flat_map(|r| r.obs.iter().copied()).collect();
        Mat::from_vec(self.records.len(), obs_dim, data).expect("records share obs_dim")
    }
}

/// Runs `horizon` steps of agent `gene` on `envs`.
///
/// The parameter snapshot and normalizer are frozen for the whole pass.
#[allow(clippy::too_many_arguments)]
pub fn collect<R: Rng + ?Sized>(
    net: &ActorCritic,
    params: &ActorCriticParams,
    gene: &LatentGene,
    normalizer: &RunningNormalizer,
    envs: &mut EnvBatch,
    horizon: usize,
    iteration: u64,
    rng: &mut R,
) -> Result<CollectedChunk> {
    if horizon == 0 {
        return Err(Error::config("ppo.horizon", "must be positive"));
    }
    let n = envs.len();
    let mut obs_raw = envs.observe();
    let mut records = Vec::with_capacity(horizon * n);
    let mut episodes = Vec::new();
    let input_for = |raw: &Mat| -> Result<Mat> { net.build_input(&normalizer.normalize(raw)?, &gene.phi) };
    for _ in 0..horizon {
        let input = input_for(&obs_raw)?;
        let actions = net.actor.forward(params.actor(), &input)?.0;
        let values = net.critic.forward(params.critic(), &input)?.0;
        let log_std = params.log_std();
        let mut sampled = Mat::zeros(n, net.action_dim);
        let mut log_probs = Vec::with_capacity(n);
        for r in 0..n {
            let mean = actions.row(r);
            let row = sampled.row_mut(r);
            for ((a, &m), &ls) in row.iter_mut().zip(mean).zip(log_std) {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                *a = m + ls.exp() * eps;
            }
            log_probs.push(crate::policy::gaussian_log_prob(mean, log_std, row));
        }
        let step = envs.step(&sampled)?;
        for r in 0..n {
            records.push(TransitionRecord {
                agent_id: gene.agent_id,
                obs: obs_raw.row(r).to_vec(),
                action: sampled.row(r).to_vec(),
                behavior_log_prob: log_probs[r],
                behavior_value: values.get(r, 0),
                reward: step.rewards[r],
                done: step.dones[r],
                truncated: step.truncated[r],
                next_obs: step.next_obs.row(r).to_vec(),
                iteration_collected: iteration,
            });
        }
        episodes.extend(step.episode_returns_completed);
        obs_raw = step.next_obs;
    }
    let bootstrap_values = net
        .critic
        .forward(params.critic(), &input_for(&obs_raw)?)?
        .0
        .into_data();
    Ok(CollectedChunk {
        agent_id: gene.agent_id,
        records,
        num_envs: n,
        bootstrap_values,
        episodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    OnPolicyGae,
    OffPolicyOneStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub kind: AdvantageKind,
}

/// Rescales to mean 0 and standard deviation 1 (std floored at 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(ADV_STD_FLOOR);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

fn check_aligned(context: &str, num_envs: usize, lens: &[usize]) -> Result<usize> {
    if num_envs == 0 {
        return Err(Error::shape(context, "num_envs > 0", 0));
    }
    let len = lens[0];
    if len % num_envs != 0 || lens.iter().any(|&l| l != len) {
        return Err(Error::shape(context, format!("equal lengths divisible by {num_envs}"), format!("{lens:?}")));
    }
    Ok(len / num_envs)
}

/// Generalized advantage estimates (unnormalized).
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_values: &[f64],
    num_envs: usize,
    gamma: f64,
    lam: f64,
) -> Result<Vec<f64>> {
    let horizon = check_aligned("gae", num_envs, &[rewards.len(), values.len(), dones.len()])?;
    if bootstrap_values.len() != num_envs {
        return Err(Error::shape("gae bootstrap", num_envs, bootstrap_values.len()));
    }
    let mut adv = vec![0.0; rewards.len()];
    for e in 0..num_envs {
        let mut next_adv = 0.0;
        let mut next_value = bootstrap_values[e];
        for t in (0..horizon).rev() {
            let i = t * num_envs + e;
            let not_done = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * not_done - values[i];
            next_adv = delta + gamma * lam * not_done * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    Ok(adv)
}

/// `n`-step bootstrapped value targets.
///
/// The sum stops at the first `done` within the window (no bootstrap);
/// windows running past the horizon bootstrap from `bootstrap_values` with
/// a correspondingly shorter `n`.
#[allow(clippy::too_many_arguments)]
pub fn n_step_targets(
    rewards: &[f64],
    dones: &[bool],
    values: &[f64],
    bootstrap_values: &[f64],
    num_envs: usize,
    gamma: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let horizon = check_aligned("n_step_targets", num_envs, &[rewards.len(), values.len(), dones.len()])?;
    if bootstrap_values.len() != num_envs {
        return Err(Error::shape("n_step bootstrap", num_envs, bootstrap_values.len()));
    }
    let mut targets = vec![0.0; rewards.len()];
    for e in 0..num_envs {
        for t in 0..horizon {
            let steps = n.min(horizon - t);
            let mut acc = 0.0;
            let mut discount = 1.0;
            let mut terminated = false;
            for j in 0..steps {
                let i = (t + j) * num_envs + e;
                acc += discount * rewards[i];
                discount *= gamma;
                if dones[i] {
                    terminated = true;
                    break;
                }
            }
            if !terminated {
                let boot = if t + steps < horizon {
                    values[(t + steps) * num_envs + e]
                } else {
                    bootstrap_values[e]
                };
                acc += discount * boot;
            }
            targets[t * num_envs + e] = acc;
        }
    }
    Ok(targets)
}

/// `r + gamma * V_old(s') * (1 - done)`.
pub fn one_step_targets(rewards: &[f64], dones: &[bool], v_old_next: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != dones.len() || rewards.len() != v_old_next.len() {
        return Err(Error::shape(
            "one_step_targets",
            rewards.len(),
            format!("dones {}, values {}", dones.len(), v_old_next.len()),
        ));
    }
    Ok(rewards
        .iter()
        .zip(dones)
        .zip(v_old_next)
        .map(|((&r, &d), &v)| if d { r } else { r + gamma * v })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffPolicySample {
    pub records: Vec<TransitionRecord>,
    pub with_replacement: bool,
}

/// Uniform draw of `count` records from the union of follower buffers.
///
/// Draws without replacement when the union is large enough.
pub fn sample_off_policy<R: Rng + ?Sized>(
    followers: &[&ReplayBuffer],
    count: usize,
    rng: &mut R,
) -> OffPolicySample {
    let sizes: Vec<usize> = followers.iter().map(|b| b.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 || count == 0 {
        return OffPolicySample {
            records: Vec::new(),
            with_replacement: false,
        };
    }
    let locate = |mut flat: usize| -> &TransitionRecord {
        for (b, &s) in followers.iter().zip(&sizes) {
            if flat < s {
                return b.get(flat);
            }
            flat -= s;
        }
        unreachable!("index within union")
    };
    let with_replacement = count > total;
    let picks: Vec<usize> = if with_replacement {
        (0..count).map(|_| rng.random_range(0..total)).collect()
    } else {
        index::sample(rng, total, count).into_vec()
    };
    OffPolicySample {
        records: picks.into_iter().map(|i| locate(i).clone()).collect(),
        with_replacement,
    }
}
