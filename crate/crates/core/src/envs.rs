//! Deterministic vectorized control tasks and environment partitioning.
//!
//! Every environment instance owns its own ChaCha stream, keyed by its global
//! index, so a batch can be split across agents (or threads) without changing
//! any result. Episodes auto-reset inside [`EnvBatch::step`].

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, stream_rng, tags, RngState};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pendulum,
    SparseMountainCar,
    MultigoalReacher,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Pendulum, Task::SparseMountainCar, Task::MultigoalReacher];

    pub fn name(self) -> &'static str {
        match self {
            Task::Pendulum => "pendulum",
            Task::SparseMountainCar => "sparse_mountain_car",
            Task::MultigoalReacher => "multigoal_reacher",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Task::Pendulum | Task::SparseMountainCar => 2,
            Task::MultigoalReacher => 4,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Task::Pendulum => 3,
            Task::SparseMountainCar => 2,
            Task::MultigoalReacher => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Task::Pendulum | Task::SparseMountainCar => 1,
            Task::MultigoalReacher => 2,
        }
    }

    pub fn episode_limit(self) -> usize {
        match self {
            Task::Pendulum => 200,
            Task::SparseMountainCar => 400,
            Task::MultigoalReacher => 100,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("env.task", format!("unknown task `{s}`")))
    }
}

pub mod pendulum {
    pub const G: f64 = 10.0;
    pub const M: f64 = 1.0;
    pub const L: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
}

pub mod mountain_car {
    pub const MIN_X: f64 = -1.2;
    pub const MAX_X: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const POWER: f64 = 0.0015;
    pub const GOAL_X: f64 = 0.45;
    pub const GOAL_REWARD: f64 = 100.0;
}

pub mod reacher {
    pub const MAX_POS: f64 = 1.0;
    pub const MAX_VEL: f64 = 0.5;
    pub const GOAL_RADIUS: f64 = 0.1;
    /// `(x, y, value)`; the first goal is the near local optimum.
    pub const GOALS: [(f64, f64, f64); 2] = [(0.3, 0.3, 1.0), (-0.8, -0.8, 10.0)];
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    theta - 2.0 * PI * ((theta - PI) / (2.0 * PI)).ceil()
}

/// A finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEnd {
    /// Global environment index.
    pub env_index: usize,
    pub episode_return: f64,
    pub length: usize,
    /// Ended by reaching a goal rather than the step limit.
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_obs: Mat,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Done because the step limit was hit, not because a goal was reached.
    pub truncated: Vec<bool>,
    pub episode_returns_completed: Vec<EpisodeEnd>,
}

/// Contiguous equal split of `N` environments across `K` agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvPartition {
    pub total_envs: usize,
    pub num_agents: usize,
    pub slices: Vec<Range<usize>>,
}

/// Agent `k` (1-based) owns `[(k-1)N/K, kN/K)`.
pub fn partition_envs(total_envs: usize, num_agents: usize) -> Result<EnvPartition> {
    if num_agents == 0 {
        return Err(Error::config("population.K", "must be at least 1"));
    }
    if total_envs == 0 || total_envs % num_agents != 0 {
        return Err(Error::config(
            "env.num_envs",
            format!("{total_envs} environments cannot be split evenly across {num_agents} agents"),
        ));
    }
    let slices = (1..=num_agents)
        .map(|k| (k - 1) * total_envs / num_agents..k * total_envs / num_agents)
        .collect();
    Ok(EnvPartition {
        total_envs,
        num_agents,
        slices,
    })
}

/// A batch of environments of one task, covering global indices `envs`.
#[derive(Debug, Clone)]
pub struct EnvBatch {
    task: Task,
    envs: Range<usize>,
    states: Mat,
    step_counts: Vec<usize>,
    running_returns: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
}

impl EnvBatch {
    /// Creates and resets the environments with global indices `envs`.
    pub fn new(task: Task, envs: Range<usize>, seed: u64) -> Self {
        let env_seed = derive_seed(seed, tags::ENV);
        let rngs = envs.clone().map(|i| stream_rng(env_seed, i as u64)).collect();
        let n = envs.len();
        let mut batch = EnvBatch {
            task,
            envs,
            states: Mat::zeros(n, task.state_dim()),
            step_counts: vec![0; n],
            running_returns: vec![0.0; n],
            rngs,
        };
        batch.reset();
        batch
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn env_indices(&self) -> Range<usize> {
        self.envs.clone()
    }

    pub fn states(&self) -> &Mat {
        &self.states
    }

    pub fn step_counts(&self) -> &[usize] {
        &self.step_counts
    }

    pub fn running_returns(&self) -> &[f64] {
        &self.running_returns
    }

    /// Overwrites one environment's physical state (episode bookkeeping is kept).
    pub fn set_state(&mut self, row: usize, state: &[f64]) -> Result<()> {
        if state.len() != self.task.state_dim() {
            return Err(Error::shape("env state", self.task.state_dim(), state.len()));
        }
        self.states.row_mut(row).copy_from_slice(state);
        Ok(())
    }

    pub fn rng_states(&self) -> Vec<RngState> {
        self.rngs.iter().map(RngState::capture).collect()
    }

    /// Restores a batch captured with [`Self::rng_states`] and the accessors above.
    pub fn restore(
        task: Task,
        envs: Range<usize>,
        states: Mat,
        step_counts: Vec<usize>,
        running_returns: Vec<f64>,
        rngs: &[RngState],
    ) -> Result<Self> {
        let n = envs.len();
        if states.rows() != n
            || states.cols() != task.state_dim()
            || step_counts.len() != n
            || running_returns.len() != n
            || rngs.len() != n
        {
            return Err(Error::Checkpoint(format!("environment batch {envs:?} has inconsistent sizes")));
        }
        let rngs = rngs
            .iter()
            .map(|s| s.restore().ok_or_else(|| Error::Checkpoint("bad env rng state".into())))
            .collect::<Result<_>>()?;
        Ok(EnvBatch {
            task,
            envs,
            states,
            step_counts,
            running_returns,
            rngs,
        })
    }

    fn reset_row(&mut self, r: usize) {
        let rng = &mut self.rngs[r];
        let row = self.states.row_mut(r);
        match self.task {
            Task::Pendulum => {
                row[0] = rng.random_range(-PI..PI);
                row[1] = rng.random_range(-1.0..1.0);
            }
            Task::SparseMountainCar => {
                row[0] = rng.random_range(-0.6..-0.4);
                row[1] = 0.0;
            }
            Task::MultigoalReacher => {
                row[0] = rng.random_range(-0.05..0.05);
                row[1] = rng.random_range(-0.05..0.05);
                row[2] = 0.0;
                row[3] = 0.0;
            }
        }
        self.step_counts[r] = 0;
        self.running_returns[r] = 0.0;
    }

    /// Resets every environment and returns the observations.
    pub fn reset(&mut self) -> Mat {
        for r in 0..self.len() {
            self.reset_row(r);
        }
        self.observe()
    }

    fn observe_row(task: Task, state: &[f64], out: &mut [f64]) {
        match task {
            Task::Pendulum => {
                out[0] = state[0].cos();
                out[1] = state[0].sin();
                out[2] = state[1];
            }
            Task::SparseMountainCar | Task::MultigoalReacher => out.copy_from_slice(state),
        }
    }

    pub fn observe(&self) -> Mat {
        let mut obs = Mat::zeros(self.len(), self.task.obs_dim());
        for r in 0..self.len() {
            Self::observe_row(self.task, self.states.row(r), obs.row_mut(r));
        }
        obs
    }

    /// Advances every environment one step. Actions are clamped to `[-1, 1]`.
    pub fn step(&mut self, actions: &Mat) -> Result<StepResult> {
        if actions.rows() != self.len() || actions.cols() != self.task.action_dim() {
            return Err(Error::shape(
                "env actions",
                format!("{}x{}", self.len(), self.task.action_dim()),
                format!("{}x{}", actions.rows(), actions.cols()),
            ));
        }
        let n = self.len();
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let mut truncated = Vec::with_capacity(n);
        let mut finished = Vec::new();
        let mut next_obs = Mat::zeros(n, self.task.obs_dim());
        for r in 0..n {
            let mut a = [0.0; 2];
            for (dst, &src) in a.iter_mut().zip(actions.row(r)) {
                *dst = src.clamp(-1.0, 1.0);
            }
            let (reward, goal) = transition(self.task, self.states.row_mut(r), &a);
            self.step_counts[r] += 1;
            self.running_returns[r] += reward;
            let done = goal || self.step_counts[r] >= self.task.episode_limit();
            if done {
                finished.push(EpisodeEnd {
                    env_index: self.envs.start + r,
                    episode_return: self.running_returns[r],
                    length: self.step_counts[r],
                    success: goal,
                });
                self.reset_row(r);
            }
            Self::observe_row(self.task, self.states.row(r), next_obs.row_mut(r));
            rewards.push(reward);
            dones.push(done);
            truncated.push(done && !goal);
        }
        Ok(StepResult {
            next_obs,
            rewards,
            dones,
            truncated,
            episode_returns_completed: finished,
        })
    }
}

/// Applies one step of dynamics in place; returns `(reward, reached_goal)`.
fn transition(task: Task, s: &mut [f64], a: &[f64; 2]) -> (f64, bool) {
    match task {
        Task::Pendulum => {
            use pendulum::*;
            let (theta, theta_dot) = (s[0], s[1]);
            let u = MAX_TORQUE * a[0];
            let reward = -(theta * theta + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
            let acc = 3.0 * G / (2.0 * L) * theta.sin() + 3.0 / (M * L * L) * u;
            let new_dot = (theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
            s[0] = wrap_angle(theta + new_dot * DT);
            s[1] = new_dot;
            (reward, false)
        }
        Task::SparseMountainCar => {
            use mountain_car::*;
            let mut v = (s[1] + POWER * a[0] - 0.0025 * (3.0 * s[0]).cos()).clamp(-MAX_SPEED, MAX_SPEED);
            let x = (s[0] + v).clamp(MIN_X, MAX_X);
            if x <= MIN_X {
                v = 0.0;
            }
            s[0] = x;
            s[1] = v;
            let mut reward = -0.1 * a[0] * a[0];
            let goal = x >= GOAL_X;
            if goal {
                reward += GOAL_REWARD;
            }
            (reward, goal)
        }
        Task::MultigoalReacher => {
            use reacher::*;
            for d in 0..2 {
                s[2 + d] = (0.98 * s[2 + d] + 0.1 * a[d]).clamp(-MAX_VEL, MAX_VEL);
                s[d] = (s[d] + 0.05 * s[2 + d]).clamp(-MAX_POS, MAX_POS);
            }
            for (gx, gy, value) in GOALS {
                if ((s[0] - gx).powi(2) + (s[1] - gy).powi(2)).sqrt() <= GOAL_RADIUS {
                    return (value, true);
                }
            }
            (-0.01 * (a[0] * a[0] + a[1] * a[1]), false)
        }
    }
}
