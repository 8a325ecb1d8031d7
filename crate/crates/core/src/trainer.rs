//! In-memory training state and the per-iteration loop.
//!
//! One iteration: fitness scores, optional evolution, collection for every
//! agent, off-policy sampling for the master, `mini_epochs` passes of joint
//! Adam steps over `[theta, psi, log_std, phi_1..phi_K]`, the adaptive
//! learning-rate rule, and finally the normalizer update.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{self, Blocks};
use crate::config::TrainConfig;
use crate::envs::{partition_envs, EnvBatch, Task};
use crate::error::{Error, Result};
use crate::evolution::{self, EvolutionEvent, FitnessTracker, PopulationState};
use crate::losses::{self, LossBreakdown, LossParts};
use crate::metrics::MetricsRow;
use crate::normalize::RunningNormalizer;
use crate::policy::{self, ActorCritic, ActorCriticParams, LatentGene};
use crate::rollout::{self, CollectedChunk, ReplayBuffer, TransitionRecord};
use crate::seeding::{derive_seed, stream_rng, tags, RngState};
use crate::tensor::{adam_step, AdamState, Mat};

pub const LR_MIN: f64 = 1e-6;
pub const LR_MAX: f64 = 1e-2;
pub const LR_FACTOR: f64 = 1.5;

/// KL-adaptive step size with a dead zone `[threshold / 2, 2 threshold]`.
pub fn adaptive_lr(current_lr: f64, measured_kl: f64, kl_threshold: f64) -> f64 {
    if measured_kl > 2.0 * kl_threshold {
        (current_lr / LR_FACTOR).max(LR_MIN)
    } else if measured_kl < kl_threshold / 2.0 {
        (current_lr * LR_FACTOR).min(LR_MAX)
    } else {
        current_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub eps_clip: f64,
    pub critic_coef: f64,
    pub entropy_coef: f64,
    pub bounds_coef: f64,
    pub bounds_limit: f64,
    pub lambda_off: f64,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossSettings {
            eps_clip: cfg.ppo.eps_clip,
            critic_coef: cfg.ppo.critic_coef,
            entropy_coef: cfg.ppo.entropy_coef,
            bounds_coef: cfg.ppo.bounds_coef,
            bounds_limit: cfg.ppo.bounds_limit,
            lambda_off: cfg.ppo.lambda_off,
        }
    }
}

/// On-policy rows for one update, pooled across agents in agent order.
#[derive(Debug, Clone, PartialEq)]
pub struct OnPolicyBatch {
    /// 0-based agent index of each row.
    pub agent: Vec<usize>,
    /// Normalized observations.
    pub obs: Mat,
    pub actions: Mat,
    pub behavior_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl OnPolicyBatch {
    pub fn len(&self) -> usize {
        self.agent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent.is_empty()
    }
}

/// The master's importance-corrected batch drawn from follower buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OffPolicyBatch {
    pub obs: Mat,
    pub actions: Mat,
    pub behavior_log_probs: Vec<f64>,
    pub master_old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl OffPolicyBatch {
    pub fn empty(obs_dim: usize, action_dim: usize) -> Self {
        OffPolicyBatch {
            obs: Mat::zeros(0, obs_dim),
            actions: Mat::zeros(0, action_dim),
            behavior_log_probs: Vec::new(),
            master_old_log_probs: Vec::new(),
            advantages: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// One agent's share of a minibatch loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentTerms {
    pub agent_id: usize,
    pub rows: usize,
    pub actor_objective: f64,
    pub critic_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchOutput {
    pub breakdown: LossBreakdown,
    /// Gradient of `breakdown.total` over the actor-critic parameters.
    pub param_grad: Vec<f64>,
    /// Gradient over all genes, `K * N_lat`, agent-major.
    pub gene_grad: Vec<f64>,
    pub per_agent: Vec<AgentTerms>,
    pub off_dropped: usize,
}

fn gather_rows(src: &Mat, rows: &[usize], out: &mut Mat, start: usize, col_offset: usize) {
    for (j, &r) in rows.iter().enumerate() {
        out.row_mut(start + j)[col_offset..col_offset + src.cols()].copy_from_slice(src.row(r));
    }
}

/// Loss and analytic gradient for one minibatch.
///
/// Each agent contributes `-L_on_k + c * critic_k` averaged over its own rows;
/// the master additionally gets `lambda * (-L_off + c * critic_off)`.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_loss(
    net: &ActorCritic,
    params: &ActorCriticParams,
    genes: &[Vec<f64>],
    on: &OnPolicyBatch,
    on_rows: &[usize],
    off: &OffPolicyBatch,
    off_rows: &[usize],
    s: &LossSettings,
) -> Result<MinibatchOutput> {
    let k = genes.len();
    let lat = net.latent_dim;
    let od = net.obs_dim;
    let ad = net.action_dim;
    let n_on = on_rows.len();
    let n_off = off_rows.len();
    let n = n_on + n_off;

    let mut input = Mat::zeros(n, net.input_dim());
    gather_rows(&on.obs, on_rows, &mut input, 0, 0);
    gather_rows(&off.obs, off_rows, &mut input, n_on, 0);
    let mut row_gene = Vec::with_capacity(n);
    for &r in on_rows {
        row_gene.push(on.agent[r]);
    }
    row_gene.extend(std::iter::repeat_n(0, n_off));
    for (r, &g) in row_gene.iter().enumerate() {
        input.row_mut(r)[od..].copy_from_slice(&genes[g]);
    }
    let mut actions = Mat::zeros(n, ad);
    gather_rows(&on.actions, on_rows, &mut actions, 0, 0);
    gather_rows(&off.actions, off_rows, &mut actions, n_on, 0);

    let (means, actor_cache) = net.actor.forward(params.actor(), &input)?;
    let (values, critic_cache) = net.critic.forward(params.critic(), &input)?;
    let log_std = params.log_std();
    let log_probs: Vec<f64> = (0..n)
        .map(|r| policy::gaussian_log_prob(means.row(r), log_std, actions.row(r)))
        .collect();

    let mut d_logp = vec![0.0; n];
    let mut d_value = vec![0.0; n];

    // Group on-policy rows by agent, keeping minibatch order within each.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, &r) in on_rows.iter().enumerate() {
        groups[on.agent[r]].push(j);
    }
    let mut per_agent = Vec::new();
    let (mut on_obj, mut on_crit, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0.0);
    for (agent, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let pick = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { rows.iter().map(|&j| f(j)).collect() };
        let new_lp = pick(&|j| log_probs[j]);
        let beh = pick(&|j| on.behavior_log_probs[on_rows[j]]);
        let adv = pick(&|j| on.advantages[on_rows[j]]);
        let vals = pick(&|j| values.get(j, 0));
        let tgt = pick(&|j| on.targets[on_rows[j]]);
        let sur = losses::on_policy_surrogate(&new_lp, &beh, &adv, s.eps_clip)?;
        let (crit, crit_grad) = losses::critic_loss_on(&vals, &tgt)?;
        for (i, &j) in rows.iter().enumerate() {
            d_logp[j] = -sur.grad[i];
            d_value[j] = s.critic_coef * crit_grad[i];
        }
        on_obj += sur.objective;
        on_crit += crit;
        clipped += sur.clip_fraction * rows.len() as f64;
        kl += sur.approx_kl * rows.len() as f64;
        per_agent.push(AgentTerms { agent_id: agent + 1, rows: rows.len(), actor_objective: sur.objective, critic_loss: crit });
    }

    let (mut off_obj, mut off_crit, mut off_clip, mut off_dropped) = (0.0, 0.0, 0.0, 0);
    if n_off > 0 {
        let master_lp = &log_probs[n_on..];
        let pick = |v: &[f64]| -> Vec<f64> { off_rows.iter().map(|&r| v[r]).collect() };
        let sur = losses::off_policy_surrogate(
            master_lp,
            &pick(&off.master_old_log_probs),
            &pick(&off.behavior_log_probs),
            &pick(&off.advantages),
            s.eps_clip,
        )?;
        let vals: Vec<f64> = (n_on..n).map(|r| values.get(r, 0)).collect();
        let (crit, crit_grad) = losses::critic_loss_off(&vals, &pick(&off.targets))?;
        for i in 0..n_off {
            d_logp[n_on + i] = -s.lambda_off * sur.grad[i];
            d_value[n_on + i] = s.lambda_off * s.critic_coef * crit_grad[i];
        }
        off_obj = sur.objective;
        off_crit = crit;
        off_clip = sur.clip_fraction;
        off_dropped = sur.dropped;
    }

    let on_means = Mat::from_vec(n_on, ad, means.data()[..n_on * ad].to_vec())?;
    let bounds = policy::bounds_loss(&on_means, s.bounds_limit, s.bounds_coef);
    let bounds_grad = policy::bounds_loss_grad(&on_means, s.bounds_limit, s.bounds_coef);
    let entropy = policy::gaussian_entropy(log_std);

    let mut d_means = Mat::zeros(n, ad);
    let mut d_log_std = vec![0.0; ad];
    for r in 0..n {
        let g = d_logp[r];
        let mean = means.row(r);
        let act = actions.row(r);
        let out = d_means.row_mut(r);
        for d in 0..ad {
            let sigma = log_std[d].exp();
            let z = (act[d] - mean[d]) / sigma;
            out[d] = g * z / sigma;
            d_log_std[d] += g * (z * z - 1.0);
        }
        if r < n_on {
            for (o, b) in out.iter_mut().zip(bounds_grad.row(r)) {
                *o += b;
            }
        }
    }
    if s.entropy_coef != 0.0 {
        for g in &mut d_log_std {
            *g -= s.entropy_coef;
        }
    }
    let d_values = Mat::from_vec(n, 1, d_value)?;
    let (actor_grad, actor_in) = net.actor.backward(params.actor(), &actor_cache, &d_means)?;
    let (critic_grad, critic_in) = net.critic.backward(params.critic(), &critic_cache, &d_values)?;

    let mut param_grad = vec![0.0; params.len()];
    param_grad[params.actor_range()].copy_from_slice(&actor_grad);
    param_grad[params.critic_range()].copy_from_slice(&critic_grad);
    param_grad[params.log_std_range()].copy_from_slice(&d_log_std);
    let mut gene_grad = vec![0.0; k * lat];
    for (r, &g) in row_gene.iter().enumerate() {
        let dst = &mut gene_grad[g * lat..(g + 1) * lat];
        let a = &actor_in.row(r)[od..];
        let c = &critic_in.row(r)[od..];
        for ((d, x), y) in dst.iter_mut().zip(a).zip(c) {
            *d += x + y;
        }
    }

    let parts = LossParts {
        on_policy_actor: on_obj,
        off_policy_actor: off_obj,
        critic_on: on_crit,
        critic_off: off_crit,
        entropy,
        bounds,
        clip_fraction_on: if n_on > 0 { clipped / n_on as f64 } else { 0.0 },
        clip_fraction_off: off_clip,
        approx_kl: if n_on > 0 { kl / n_on as f64 } else { 0.0 },
    };
    let breakdown = losses::combine(&parts, s.lambda_off, s.critic_coef, s.entropy_coef)?;
    Ok(MinibatchOutput { breakdown, param_grad, gene_grad, per_agent, off_dropped })
}

/// Inputs and outputs of one minibatch step, kept when capture is on.
#[derive(Debug, Clone)]
pub struct MinibatchCapture {
    pub epoch: usize,
    pub on_rows: Vec<usize>,
    pub off_rows: Vec<usize>,
    pub params_before: Vec<f64>,
    pub genes_before: Vec<Vec<f64>>,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct IterationCapture {
    pub iteration: u64,
    pub chunks: Vec<CollectedChunk>,
    pub normalizer: RunningNormalizer,
    pub value_normalizer: RunningNormalizer,
    pub on: OnPolicyBatch,
    pub off: OffPolicyBatch,
    pub minibatches: Vec<MinibatchCapture>,
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    pub metrics: MetricsRow,
    pub event: Option<EvolutionEvent>,
    pub capture: Option<IterationCapture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEval {
    pub agent_id: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub episodes: usize,
    pub seed: u64,
    pub agents: Vec<AgentEval>,
}

impl EvalReport {
    pub fn master(&self) -> &AgentEval {
        &self.agents[0]
    }
}

/// Deterministic mean-action rollouts of one gene: `episodes` parallel
/// environments, each run through its first episode.
pub fn evaluate_gene(
    net: &ActorCritic,
    params: &ActorCriticParams,
    normalizer: &RunningNormalizer,
    gene: &LatentGene,
    task: Task,
    episodes: usize,
    seed: u64,
) -> Result<AgentEval> {
    if episodes == 0 {
        return Err(Error::config("--episodes", "must be at least 1"));
    }
    let mut envs = EnvBatch::new(task, 0..episodes, derive_seed(seed, tags::EVAL));
    let mut returns = vec![f64::NAN; episodes];
    let mut success = vec![false; episodes];
    let mut remaining = episodes;
    let mut obs = envs.observe();
    while remaining > 0 {
        let input = net.build_input(&normalizer.normalize(&obs)?, &gene.phi)?;
        let means = net.actor.forward(params.actor(), &input)?.0;
        let step = envs.step(&means)?;
        for end in step.episode_returns_completed {
            if returns[end.env_index].is_nan() {
                returns[end.env_index] = end.episode_return;
                success[end.env_index] = end.success;
                remaining -= 1;
            }
        }
        obs = step.next_obs;
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(AgentEval {
        agent_id: gene.agent_id,
        mean_return: mean,
        std_return: var.sqrt(),
        success_rate: success.iter().filter(|&&s| s).count() as f64 / n,
        returns,
    })
}

pub struct Trainer {
    config: TrainConfig,
    net: ActorCritic,
    params: ActorCriticParams,
    population: PopulationState,
    adam: AdamState,
    lr: f64,
    normalizer: RunningNormalizer,
    value_norm: RunningNormalizer,
    envs: Vec<EnvBatch>,
    buffers: Vec<ReplayBuffer>,
    fitness: FitnessTracker,
    agent_rngs: Vec<ChaCha8Rng>,
    sampler_rng: ChaCha8Rng,
    evolution_rng: ChaCha8Rng,
    iteration: u64,
    env_steps: u64,
    capture: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let task = config.env.task;
        let k = config.population.k;
        let lat = config.population.n_lat;
        let seed = config.run.seed;
        let net = ActorCritic::new(task.obs_dim(), task.action_dim(), lat, &config.network.hidden, config.network.activation)?;
        let mut init = stream_rng(derive_seed(seed, tags::INIT), 0);
        let params = net.init_params(&mut init);
        let genes = (1..=k).map(|id| LatentGene::random(id, lat, &mut init)).collect();
        let population = PopulationState::new(genes, config.elite_count().unwrap_or(0));
        let partition = partition_envs(config.env.num_envs, k)?;
        let envs = partition.slices.iter().map(|r| EnvBatch::new(task, r.clone(), seed)).collect();
        let per = config.envs_per_agent();
        let buffers = (1..=k)
            .map(|id| ReplayBuffer::with_chunks(id, config.buffer.chunks, config.ppo.horizon, per))
            .collect();
        let agent_seed = derive_seed(seed, tags::AGENT);
        Ok(Trainer {
            adam: AdamState::new(params.len() + k * lat),
            lr: config.opt.lr,
            normalizer: RunningNormalizer::new(task.obs_dim()),
            value_norm: RunningNormalizer::new(1),
            fitness: FitnessTracker::new(k, config.population.fitness_window, config.population.fitness_min_episodes),
            agent_rngs: (1..=k).map(|id| stream_rng(agent_seed, id as u64)).collect(),
            sampler_rng: stream_rng(derive_seed(seed, tags::SAMPLER), 0),
            evolution_rng: stream_rng(derive_seed(seed, tags::EVOLUTION), 0),
            iteration: 0,
            env_steps: 0,
            capture: false,
            config,
            net,
            params,
            population,
            envs,
            buffers,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &ActorCritic {
        &self.net
    }

    pub fn params(&self) -> &ActorCriticParams {
        &self.params
    }

    pub fn population(&self) -> &PopulationState {
        &self.population
    }

    pub fn normalizer(&self) -> &RunningNormalizer {
        &self.normalizer
    }

    pub fn value_normalizer(&self) -> &RunningNormalizer {
        &self.value_norm
    }

    /// Critic output to return scale.
    fn value_out(&self, v: f64) -> f64 {
        if self.config.ppo.normalize_value {
            self.value_norm.destandardize(v)
        } else {
            v
        }
    }

    /// Return scale to critic output scale.
    fn value_in(&self, v: f64) -> f64 {
        if self.config.ppo.normalize_value {
            self.value_norm.standardize(v)
        } else {
            v
        }
    }

    /// Reward used for targets: a step-limit ending bootstraps with
    /// `gamma * V(s)` since the post-step state is replaced by the reset.
    fn learning_reward(&self, r: &TransitionRecord, value: f64) -> f64 {
        if r.truncated && self.config.ppo.bootstrap_timeouts {
            r.reward + self.config.ppo.gamma * value
        } else {
            r.reward
        }
    }

    pub fn fitness(&self) -> &FitnessTracker {
        &self.fitness
    }

    pub fn buffers(&self) -> &[ReplayBuffer] {
        &self.buffers
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.config.run.total_env_steps
    }

    /// Keeps per-minibatch inputs in each [`IterationReport`].
    pub fn set_capture(&mut self, on: bool) {
        self.capture = on;
    }

    /// Changes the collection thread count; results do not depend on it.
    pub fn set_threads(&mut self, threads: usize) {
        self.config.run.threads = threads.max(1);
    }

    /// Empties every follower buffer.
    pub fn clear_follower_buffers(&mut self) {
        for b in self.buffers.iter_mut().skip(1) {
            b.clear();
        }
    }

    fn genes_flat(&self) -> Vec<f64> {
        self.population.genes.iter().flat_map(|g| g.phi.iter().copied()).collect()
    }

    fn gene_vecs(&self) -> Vec<Vec<f64>> {
        self.population.genes.iter().map(|g| g.phi.clone()).collect()
    }

    fn maybe_evolve(&mut self) -> Result<Option<EvolutionEvent>> {
        let Some(settings) = self.config.evolution_settings() else {
            return Ok(None);
        };
        let scores = self.fitness.follower_scores();
        let decision = evolution::trigger(&settings, &scores, self.iteration, self.population.last_evolution_iteration);
        if !decision.evolve {
            return Ok(None);
        }
        let defined: Vec<f64> = scores.into_iter().map(|s| s.expect("trigger requires defined scores")).collect();
        let (next, event) = evolution::evolve(
            &self.population,
            &defined,
            settings.crossover,
            settings.sigma_mut,
            decision,
            self.iteration,
            &mut self.evolution_rng,
        )?;
        self.population = next;
        let lat = self.config.population.n_lat;
        let base = self.params.len();
        for slot in event.replaced() {
            self.fitness.clear(slot);
            let r = base + (slot - 1) * lat..base + slot * lat;
            self.adam.m[r.clone()].fill(0.0);
            self.adam.v[r].fill(0.0);
        }
        Ok(Some(event))
    }

    fn collect_all(&mut self) -> Result<Vec<CollectedChunk>> {
        let k = self.population.k();
        let threads = self.config.run.threads.clamp(1, k);
        let horizon = self.config.ppo.horizon;
        let iteration = self.iteration;
        let net = &self.net;
        let params = &self.params;
        let normalizer = &self.normalizer;
        let mut jobs: Vec<(&LatentGene, &mut EnvBatch, &mut ChaCha8Rng)> = self
            .population
            .genes
            .iter()
            .zip(self.envs.iter_mut())
            .zip(self.agent_rngs.iter_mut())
            .map(|((g, e), r)| (g, e, r))
            .collect();
        let run = |batch: &mut [(&LatentGene, &mut EnvBatch, &mut ChaCha8Rng)]| -> Vec<Result<CollectedChunk>> {
            batch
                .iter_mut()
                .map(|(g, e, r)| rollout::collect(net, params, g, normalizer, e, horizon, iteration, *r))
                .collect()
        };
        let results: Vec<Result<CollectedChunk>> = if threads == 1 {
            run(&mut jobs)
        } else {
            let per = k.div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = jobs.chunks_mut(per).map(|c| scope.spawn(|| run(c))).collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("collection thread panicked"))
                    .collect()
            })
        };
        results.into_iter().collect()
    }

    /// Targets come out in return scale; the caller standardizes them.
    fn build_on_policy(&self, chunks: &[CollectedChunk]) -> Result<OnPolicyBatch> {
        let od = self.net.obs_dim;
        let ad = self.net.action_dim;
        let p = &self.config.ppo;
        let total: usize = chunks.iter().map(|c| c.records.len()).sum();
        let mut batch = OnPolicyBatch {
            agent: Vec::with_capacity(total),
            obs: Mat::zeros(0, od),
            actions: Mat::zeros(0, ad),
            behavior_log_probs: Vec::with_capacity(total),
            advantages: Vec::with_capacity(total),
            targets: Vec::with_capacity(total),
        };
        let mut obs_parts = Vec::with_capacity(chunks.len());
        let mut act_data = Vec::with_capacity(total * ad);
        for (a, chunk) in chunks.iter().enumerate() {
            let rewards: Vec<f64> = chunk.records.iter().map(|r| self.learning_reward(r, r.behavior_value)).collect();
            let dones: Vec<bool> = chunk.records.iter().map(|r| r.done).collect();
            let values: Vec<f64> = chunk.records.iter().map(|r| r.behavior_value).collect();
            let mut adv = rollout::gae_advantages(&rewards, &values, &dones, &chunk.bootstrap_values, chunk.num_envs, p.gamma, p.lambda_gae)?;
            rollout::normalize_advantages(&mut adv);
            let targets = rollout::n_step_targets(&rewards, &dones, &values, &chunk.bootstrap_values, chunk.num_envs, p.gamma, p.n_step)?;
            obs_parts.push(self.normalizer.normalize(&chunk.raw_obs(od))?);
            for r in &chunk.records {
                batch.agent.push(a);
                batch.behavior_log_probs.push(r.behavior_log_prob);
                act_data.extend_from_slice(&r.action);
            }
            batch.advantages.extend(adv);
            batch.targets.extend(targets);
        }
        batch.obs = Mat::vstack(&obs_parts)?;
        batch.actions = Mat::from_vec(total, ad, act_data)?;
        Ok(batch)
    }

    /// Samples `S'_1` and prepares its fixed quantities with the current
    /// (pre-update) parameters and the master gene. Returns the number of
    /// records dropped for a non-finite correction term.
    fn build_off_policy(&mut self, count: usize) -> Result<(OffPolicyBatch, usize)> {
        let od = self.net.obs_dim;
        let ad = self.net.action_dim;
        if self.population.k() < 2 || count == 0 {
            return Ok((OffPolicyBatch::empty(od, ad), 0));
        }
        let followers: Vec<&ReplayBuffer> = self.buffers.iter().skip(1).collect();
        let sample = rollout::sample_off_policy(&followers, count, &mut self.sampler_rng);
        if sample.records.is_empty() {
            return Ok((OffPolicyBatch::empty(od, ad), 0));
        }
        let recs = &sample.records;
        let n = recs.len();
        let raw = |f: &dyn Fn(&TransitionRecord) -> &[f64]| -> Result<Mat> {
            Mat::from_vec(n, od, recs.iter().flat_map(|r| f(r).iter().copied()).collect())
        };
        let obs = self.normalizer.normalize(&raw(&|r| &r.obs)?)?;
        let next_obs = self.normalizer.normalize(&raw(&|r| &r.next_obs)?)?;
        let actions = Mat::from_vec(n, ad, recs.iter().flat_map(|r| r.action.iter().copied()).collect())?;
        let master = &self.population.genes[0];
        let (old_lp, _) = self.net.log_prob_and_entropy(&self.params, master, &obs, &actions)?;
        let v_s: Vec<f64> = self.net.value(&self.params, master, &obs)?.into_iter().map(|v| self.value_out(v)).collect();
        let v_next: Vec<f64> = self.net.value(&self.params, master, &next_obs)?.into_iter().map(|v| self.value_out(v)).collect();
        let rewards: Vec<f64> = recs.iter().zip(&v_s).map(|(r, &v)| self.learning_reward(r, v)).collect();
        let dones: Vec<bool> = recs.iter().map(|r| r.done).collect();
        let targets = rollout::one_step_targets(&rewards, &dones, &v_next, self.config.ppo.gamma)?;

        let keep: Vec<usize> = (0..n)
            .filter(|&i| {
                let mu = (old_lp[i] - recs[i].behavior_log_prob).exp();
                mu.is_finite() && targets[i].is_finite()
            })
            .collect();
        let dropped = n - keep.len();
        let mut adv: Vec<f64> = keep.iter().map(|&i| targets[i] - v_s[i]).collect();
        rollout::normalize_advantages(&mut adv);
        let batch = OffPolicyBatch {
            obs: obs.select_rows(&keep),
            actions: actions.select_rows(&keep),
            behavior_log_probs: keep.iter().map(|&i| recs[i].behavior_log_prob).collect(),
            master_old_log_probs: keep.iter().map(|&i| old_lp[i]).collect(),
            advantages: adv,
            targets: keep.iter().map(|&i| self.value_in(targets[i])).collect(),
        };
        Ok((batch, dropped))
    }

    /// Runs one full iteration.
    pub fn step(&mut self) -> Result<IterationReport> {
        let event = self.maybe_evolve()?;

        let mut chunks = self.collect_all()?;
        if self.config.ppo.normalize_value {
            for chunk in &mut chunks {
                for r in &mut chunk.records {
                    r.behavior_value = self.value_norm.destandardize(r.behavior_value);
                }
                for v in &mut chunk.bootstrap_values {
                    *v = self.value_norm.destandardize(*v);
                }
            }
        }
        for chunk in &chunks {
            for ep in &chunk.episodes {
                self.fitness.record(chunk.agent_id, ep.episode_return);
            }
            self.buffers[chunk.agent_id - 1].extend(chunk.records.iter().cloned());
        }
        self.env_steps += (self.config.env.num_envs * self.config.ppo.horizon) as u64;

        let mut on = self.build_on_policy(&chunks)?;
        // Fold this iteration's returns in before standardizing so the first
        // update does not fit raw returns against placeholder statistics.
        if self.config.ppo.normalize_value {
            self.value_norm.update_scalars(&on.targets)?;
            for t in &mut on.targets {
                *t = self.value_norm.standardize(*t);
            }
        }
        let master_size = chunks[0].records.len();
        let (off, pre_dropped) = self.build_off_policy(master_size)?;
        let use_off = self.config.ppo.lambda_off != 0.0 && !off.is_empty();

        let settings = LossSettings::from_config(&self.config);
        let m = self.config.num_minibatches();
        let mb = self.config.minibatch_size();
        let mut on_order: Vec<usize> = (0..on.len()).collect();
        let mut off_order: Vec<usize> = (0..off.len()).collect();
        let mut sums = LossBreakdown::default();
        let mut last_kl = 0.0;
        let mut count = 0usize;
        let mut last_epoch_dropped = 0usize;
        let mut captures = Vec::new();
        let plen = self.params.len();
        for epoch in 0..self.config.ppo.mini_epochs {
            on_order.shuffle(&mut self.sampler_rng);
            off_order.shuffle(&mut self.sampler_rng);
            last_epoch_dropped = 0;
            for b in 0..m {
                let on_rows = &on_order[b * mb..(b + 1) * mb];
                let off_rows: &[usize] = if use_off {
                    &off_order[b * off.len() / m..(b + 1) * off.len() / m]
                } else {
                    &[]
                };
                let genes = self.gene_vecs();
                let out = minibatch_loss(&self.net, &self.params, &genes, &on, on_rows, &off, off_rows, &settings)?;
                if self.capture {
                    captures.push(MinibatchCapture {
                        epoch,
                        on_rows: on_rows.to_vec(),
                        off_rows: off_rows.to_vec(),
                        params_before: self.params.values().to_vec(),
                        genes_before: genes,
                        breakdown: out.breakdown,
                    });
                }
                let mut flat = self.params.values().to_vec();
                flat.extend(self.genes_flat());
                let mut grad = out.param_grad;
                grad.extend(out.gene_grad);
                adam_step(&mut flat, &grad, &mut self.adam, self.lr, self.config.opt.max_grad_norm)?;
                self.params.values_mut().copy_from_slice(&flat[..plen]);
                self.params.clamp_log_std();
                let lat = self.config.population.n_lat;
                for (i, g) in self.population.genes.iter_mut().enumerate() {
                    g.phi.copy_from_slice(&flat[plen + i * lat..plen + (i + 1) * lat]);
                }
                let bd = out.breakdown;
                sums.on_policy_actor += bd.on_policy_actor;
                sums.off_policy_actor += bd.off_policy_actor;
                sums.critic_on += bd.critic_on;
                sums.critic_off += bd.critic_off;
                sums.entropy += bd.entropy;
                sums.bounds += bd.bounds;
                sums.total += bd.total;
                sums.clip_fraction_on += bd.clip_fraction_on;
                sums.clip_fraction_off += bd.clip_fraction_off;
                last_kl = bd.approx_kl;
                last_epoch_dropped += out.off_dropped;
                count += 1;
            }
        }
        let inv = 1.0 / count as f64;
        if self.config.opt.adaptive_lr {
            self.lr = adaptive_lr(self.lr, last_kl, self.config.opt.kl_threshold);
        }

        let capture = self.capture.then(|| IterationCapture {
            iteration: self.iteration,
            chunks: chunks.clone(),
            normalizer: self.normalizer.clone(),
            value_normalizer: self.value_norm.clone(),
            on: on.clone(),
            off: off.clone(),
            minibatches: captures,
        });

        for chunk in &chunks {
            self.normalizer.update(&chunk.raw_obs(self.net.obs_dim))?;
        }

        let master_window = self.fitness.window(1);
        let master_mean_return = if master_window.is_empty() {
            f64::NAN
        } else {
            master_window.iter().sum::<f64>() / master_window.len() as f64
        };
        let follower: Option<Vec<f64>> = self.fitness.follower_scores().into_iter().collect();
        let (fmin, fmed, fmax) = match follower {
            Some(f) if !f.is_empty() => (
                f.iter().copied().fold(f64::INFINITY, f64::min),
                evolution::median(&f),
                f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            _ => (f64::NAN, f64::NAN, f64::NAN),
        };
        self.iteration += 1;
        let metrics = MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            lr: self.lr,
            approx_kl: last_kl,
            loss_total: sums.total * inv,
            loss_actor_on: sums.on_policy_actor * inv,
            loss_actor_off: sums.off_policy_actor * inv,
            loss_critic_on: sums.critic_on * inv,
            loss_critic_off: sums.critic_off * inv,
            entropy: sums.entropy * inv,
            bounds: sums.bounds * inv,
            clip_frac_on: sums.clip_fraction_on * inv,
            clip_frac_off: sums.clip_fraction_off * inv,
            master_mean_return,
            fitness_min: fmin,
            fitness_median: fmed,
            fitness_max: fmax,
            evolved: event.is_some(),
            offpolicy_dropped: (pre_dropped + last_epoch_dropped) as u64,
        };
        Ok(IterationReport { metrics, event, capture })
    }

    /// Deterministic evaluation of the master (or every gene).
    pub fn evaluate(&self, episodes: usize, seed: u64, all_genes: bool) -> Result<EvalReport> {
        let genes: &[LatentGene] = if all_genes { &self.population.genes } else { &self.population.genes[..1] };
        let agents = genes
            .iter()
            .map(|g| evaluate_gene(&self.net, &self.params, &self.normalizer, g, self.config.env.task, episodes, seed))
            .collect::<Result<_>>()?;
        Ok(EvalReport { task: self.config.env.task, episodes, seed, agents })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut blocks = Blocks::new();
        for b in self.params.vector().layout() {
            blocks.insert(format!("params.{}", b.name), b.shape.clone(), self.params.values()[b.range()].to_vec())?;
        }
        let k = self.population.k();
        let lat = self.config.population.n_lat;
        blocks.insert("genes", vec![k, lat], self.genes_flat())?;
        blocks.insert("adam.m", vec![self.adam.m.len()], self.adam.m.clone())?;
        blocks.insert("adam.v", vec![self.adam.v.len()], self.adam.v.clone())?;
        let od = self.net.obs_dim;
        blocks.insert("normalizer.mean", vec![od], self.normalizer.mean.clone())?;
        blocks.insert("normalizer.var", vec![od], self.normalizer.var.clone())?;
        blocks.insert("value_normalizer", vec![3], vec![self.value_norm.mean[0], self.value_norm.var[0], self.value_norm.count])?;
        let sd = self.config.env.task.state_dim();
        let mut env_state = Vec::new();
        for (i, e) in self.envs.iter().enumerate() {
            blocks.insert(format!("env.{}.states", i + 1), vec![e.len(), sd], e.states().data().to_vec())?;
            blocks.insert(format!("env.{}.running_returns", i + 1), vec![e.len()], e.running_returns().to_vec())?;
            env_state.push(json!({
                "range": [e.env_indices().start, e.env_indices().end],
                "step_counts": e.step_counts(),
                "rngs": e.rng_states(),
            }));
        }
        let width = record_width(od, self.net.action_dim);
        let mut buffer_state = Vec::new();
        for b in &self.buffers {
            let data: Vec<f64> = b.iter_chronological().flat_map(|r| encode_record(r)).collect();
            blocks.insert(format!("buffer.{}", b.agent_id()), vec![b.len(), width], data)?;
            buffer_state.push(json!({"agent_id": b.agent_id(), "capacity": b.capacity()}));
        }
        let state = json!({
            "config": self.config,
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "lr": self.lr,
            "adam_step": self.adam.step_count,
            "normalizer_count": self.normalizer.count,
            "population": {
                "master_index": self.population.master_index,
                "elite_count": self.population.elite_count,
                "generation": self.population.generation,
                "last_evolution_iteration": self.population.last_evolution_iteration,
            },
            "fitness": self.fitness,
            "rngs": {
                "agents": self.agent_rngs.iter().map(RngState::capture).collect::<Vec<_>>(),
                "sampler": RngState::capture(&self.sampler_rng),
                "evolution": RngState::capture(&self.evolution_rng),
            },
            "envs": env_state,
            "buffers": buffer_state,
        });
        checkpoint::write(path, &state, &blocks)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (state, blocks) = checkpoint::read(path)?;
        let bad = |what: &str| Error::Checkpoint(format!("checkpoint state: bad or missing {what}"));
        let config: TrainConfig = serde_json::from_value(state["config"].clone()).map_err(|_| bad("config"))?;
        let mut t = Trainer::new(config)?;
        let flat: Vec<f64> = {
            let mut v = vec![0.0; t.params.len()];
            for b in t.params.vector().layout() {
                v[b.range()].copy_from_slice(blocks.values(&format!("params.{}", b.name), b.len())?);
            }
            v
        };
        t.params.values_mut().copy_from_slice(&flat);
        let k = t.population.k();
        let lat = t.config.population.n_lat;
        let genes = blocks.values("genes", k * lat)?;
        for (i, g) in t.population.genes.iter_mut().enumerate() {
            g.phi.copy_from_slice(&genes[i * lat..(i + 1) * lat]);
        }
        let n = t.adam.m.len();
        t.adam.m.copy_from_slice(blocks.values("adam.m", n)?);
        t.adam.v.copy_from_slice(blocks.values("adam.v", n)?);
        t.adam.step_count = state["adam_step"].as_u64().ok_or_else(|| bad("adam_step"))?;
        let od = t.net.obs_dim;
        t.normalizer.mean.copy_from_slice(blocks.values("normalizer.mean", od)?);
        t.normalizer.var.copy_from_slice(blocks.values("normalizer.var", od)?);
        t.normalizer.count = state["normalizer_count"].as_f64().ok_or_else(|| bad("normalizer_count"))?;
        let vn = blocks.values("value_normalizer", 3)?;
        t.value_norm = RunningNormalizer { mean: vec![vn[0]], var: vec![vn[1]], count: vn[2] };
        t.iteration = state["iteration"].as_u64().ok_or_else(|| bad("iteration"))?;
        t.env_steps = state["env_steps"].as_u64().ok_or_else(|| bad("env_steps"))?;
        t.lr = state["lr"].as_f64().ok_or_else(|| bad("lr"))?;
        let pop = &state["population"];
        t.population.elite_count = pop["elite_count"].as_u64().ok_or_else(|| bad("population"))? as usize;
        t.population.generation = pop["generation"].as_u64().ok_or_else(|| bad("population"))?;
        t.population.last_evolution_iteration = pop["last_evolution_iteration"].as_u64();
        t.fitness = serde_json::from_value(state["fitness"].clone()).map_err(|_| bad("fitness"))?;
        let rng = |v: &Value| -> Result<ChaCha8Rng> {
            let s: RngState = serde_json::from_value(v.clone()).map_err(|_| bad("rng state"))?;
            s.restore().ok_or_else(|| bad("rng state"))
        };
        let agents = state["rngs"]["agents"].as_array().ok_or_else(|| bad("agent rngs"))?;
        if agents.len() != k {
            return Err(bad("agent rngs"));
        }
        t.agent_rngs = agents.iter().map(rng).collect::<Result<_>>()?;
        t.sampler_rng = rng(&state["rngs"]["sampler"])?;
        t.evolution_rng = rng(&state["rngs"]["evolution"])?;

        let task = t.config.env.task;
        let sd = task.state_dim();
        let env_state = state["envs"].as_array().ok_or_else(|| bad("envs"))?;
        if env_state.len() != k {
            return Err(bad("envs"));
        }
        for (i, es) in env_state.iter().enumerate() {
            let range = t.envs[i].env_indices();
            let len = range.len();
            let states = Mat::from_vec(len, sd, blocks.values(&format!("env.{}.states", i + 1), len * sd)?.to_vec())?;
            let running = blocks.values(&format!("env.{}.running_returns", i + 1), len)?.to_vec();
            let steps: Vec<usize> = serde_json::from_value(es["step_counts"].clone()).map_err(|_| bad("env step counts"))?;
            let rngs: Vec<RngState> = serde_json::from_value(es["rngs"].clone()).map_err(|_| bad("env rngs"))?;
            t.envs[i] = EnvBatch::restore(task, range, states, steps, running, &rngs)?;
        }
        let ad = t.net.action_dim;
        let width = record_width(od, ad);
        for i in 0..k {
            let (shape, data) = blocks.get(&format!("buffer.{}", i + 1))?;
            if shape.len() != 2 || shape[1] != width {
                return Err(bad("replay buffer shape"));
            }
            let records = data.chunks_exact(width).map(|row| decode_record(row, od, ad)).collect();
            let cap = t.buffers[i].capacity();
            t.buffers[i] = ReplayBuffer::from_chronological(i + 1, cap, records);
        }
        Ok(t)
    }
}

fn record_width(od: usize, ad: usize) -> usize {
    2 * od + ad + 7
}

fn encode_record(r: &TransitionRecord) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * r.obs.len() + r.action.len() + 6);
    v.push(r.agent_id as f64);
    v.extend_from_slice(&r.obs);
    v.extend_from_slice(&r.action);
    v.push(r.behavior_log_prob);
    v.push(r.behavior_value);
    v.push(r.reward);
    v.push(if r.done { 1.0 } else { 0.0 });
    v.push(if r.truncated { 1.0 } else { 0.0 });
    v.extend_from_slice(&r.next_obs);
    v.push(r.iteration_collected as f64);
    v
}

fn decode_record(row: &[f64], od: usize, ad: usize) -> TransitionRecord {
    let mut i = 0;
    let mut take = |n: usize| {
        let s = &row[i..i + n];
        i += n;
        s.to_vec()
    };
    let agent_id = take(1)[0] as usize;
    let obs = take(od);
    let action = take(ad);
    let scal = take(5);
    let next_obs = take(od);
    let iteration_collected = take(1)[0] as u64;
    TransitionRecord {
        agent_id,
        obs,
        action,
        behavior_log_prob: scal[0],
        behavior_value: scal[1],
        reward: scal[2],
        done: scal[3] != 0.0,
        truncated: scal[4] != 0.0,
        next_obs,
        iteration_collected,
    }
}

/// Evaluates a checkpoint on disk; `task` must match when given.
pub fn evaluate_checkpoint(
    path: &Path,
    task: Option<Task>,
    episodes: usize,
    seed: u64,
    all_genes: bool,
) -> Result<EvalReport> {
    let t = Trainer::load_checkpoint(path)?;
    if let Some(task) = task {
        if task != t.config.env.task {
            return Err(Error::config(
                "--task",
                format!("checkpoint was trained on {}, not {task}", t.config.env.task),
            ));
        }
    }
    t.evaluate(episodes, seed, all_genes)
}
