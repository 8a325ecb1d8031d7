//! Genetic algorithm over latent genes: fitness windows, the trigger rule,
//! elitist selection, crossover and Gaussian mutation.
//!
//! Only genes are evolved. The shared network never passes through here.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::LatentGene;

pub const MEDIAN_GUARD: f64 = 1e-6;
pub const FITNESS_WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    FitnessGap,
    FixedInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossover {
    Average,
    Uniform,
    FitnessWeighted,
}

impl Crossover {
    pub fn name(self) -> &'static str {
        match self {
            Crossover::Average => "average",
            Crossover::Uniform => "uniform",
            Crossover::FitnessWeighted => "fitness_weighted",
        }
    }
}

impl fmt::Display for Crossover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Crossover {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Crossover::Average),
            "uniform" => Ok(Crossover::Uniform),
            "fitness_weighted" => Ok(Crossover::FitnessWeighted),
            other => Err(Error::config("population.crossover", format!("unknown strategy `{other}`"))),
        }
    }
}

/// Sliding windows of completed-episode returns, one per agent (index 0 is
/// the master).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessTracker {
    window: usize,
    min_episodes: usize,
    windows: Vec<VecDeque<f64>>,
    episodes_seen: Vec<u64>,
}

impl FitnessTracker {
    pub fn new(num_agents: usize, window: usize, min_episodes: usize) -> Self {
        FitnessTracker {
            window: window.max(1),
            min_episodes,
            windows: vec![VecDeque::new(); num_agents],
            episodes_seen: vec![0; num_agents],
        }
    }

    pub fn num_agents(&self) -> usize {
        self.windows.len()
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn min_episodes(&self) -> usize {
        self.min_episodes
    }

    pub fn record(&mut self, agent_id: usize, episode_return: f64) {
        let w = &mut self.windows[agent_id - 1];
        if w.len() == self.window {
            w.pop_front();
        }
        w.push_back(episode_return);
        self.episodes_seen[agent_id - 1] += 1;
    }

    pub fn window(&self, agent_id: usize) -> Vec<f64> {
        self.windows[agent_id - 1].iter().copied().collect()
    }

    pub fn episodes_seen(&self, agent_id: usize) -> u64 {
        self.episodes_seen[agent_id - 1]
    }

    pub fn clear(&mut self, agent_id: usize) {
        self.windows[agent_id - 1].clear();
    }

    /// Mean of the window; `None` below `min_episodes`.
    pub fn score(&self, agent_id: usize) -> Option<f64> {
        let w = &self.windows[agent_id - 1];
        if w.is_empty() || w.len() < self.min_episodes {
            return None;
        }
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }

    /// Scores of agents `2..=K`.
    pub fn follower_scores(&self) -> Vec<Option<f64>> {
        (2..=self.num_agents()).map(|id| self.score(id)).collect()
    }
}

pub fn evaluate_fitness(tracker: &FitnessTracker, agent_id: usize) -> Option<f64> {
    tracker.score(agent_id)
}

/// Even counts average the two middle values.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub evolve: bool,
    pub lhs: f64,
    pub rhs: f64,
}

/// `max - min > gamma * |median|`, with the near-zero median fallback
/// `gamma * (|max| + 1e-6)`.
pub fn fitness_gap(scores: &[f64], gamma_trigger: f64) -> TriggerDecision {
    if scores.is_empty() {
        return TriggerDecision { evolve: false, lhs: 0.0, rhs: 0.0 };
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let med = median(scores);
    let lhs = max - min;
    let rhs = if med.abs() < MEDIAN_GUARD {
        gamma_trigger * (max.abs() + MEDIAN_GUARD)
    } else {
        gamma_trigger * med.abs()
    };
    TriggerDecision { evolve: lhs > rhs, lhs, rhs }
}

/// Undefined scores always block. In `FixedInterval` mode the timing is the
/// scheduler's job, so defined scores suffice.
pub fn should_evolve(scores: &[Option<f64>], gamma_trigger: f64, mode: TriggerMode) -> bool {
    let Some(defined) = scores.iter().copied().collect::<Option<Vec<f64>>>() else {
        return false;
    };
    match mode {
        TriggerMode::FitnessGap => fitness_gap(&defined, gamma_trigger).evolve,
        TriggerMode::FixedInterval => !defined.is_empty(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSettings {
    pub elite_count: usize,
    pub sigma_mut: f64,
    pub crossover: Crossover,
    pub gamma_trigger: f64,
    pub trigger_mode: TriggerMode,
    /// Interval for `FixedInterval`; `None` never fires.
    pub interval: Option<u64>,
    pub cooldown: u64,
}

/// Full scheduling decision for one iteration, including cooldown.
pub fn trigger(
    settings: &EvolutionSettings,
    scores: &[Option<f64>],
    iteration: u64,
    last_evolution: Option<u64>,
) -> TriggerDecision {
    let blocked = TriggerDecision { evolve: false, lhs: f64::NAN, rhs: f64::NAN };
    let Some(defined) = scores.iter().copied().collect::<Option<Vec<f64>>>() else {
        return blocked;
    };
    if defined.is_empty() {
        return blocked;
    }
    let gap = fitness_gap(&defined, settings.gamma_trigger);
    let cooled = last_evolution.is_none_or(|last| iteration.saturating_sub(last) >= settings.cooldown);
    let evolve = match settings.trigger_mode {
        TriggerMode::FitnessGap => gap.evolve && cooled,
        TriggerMode::FixedInterval => match settings.interval {
            Some(i) if i > 0 => iteration > 0 && iteration % i == 0 && cooled,
            _ => false,
        },
    };
    TriggerDecision { evolve, ..gap }
}

pub fn crossover<R: Rng + ?Sized>(
    phi_i: &[f64],
    phi_j: &[f64],
    strategy: Crossover,
    fitness: (f64, f64),
    rng: &mut R,
) -> Result<Vec<f64>> {
    if phi_i.len() != phi_j.len() {
        return Err(Error::shape("crossover", format!("{}", phi_i.len()), format!("{}", phi_j.len())));
    }
    Ok(match strategy {
        Crossover::Average => phi_i.iter().zip(phi_j).map(|(a, b)| 0.5 * (a + b)).collect(),
        Crossover::Uniform => phi_i
            .iter()
            .zip(phi_j)
            .map(|(&a, &b)| if rng.random_bool(0.5) { a } else { b })
            .collect(),
        Crossover::FitnessWeighted => {
            let low = fitness.0.min(fitness.1);
            let wi = fitness.0 - low + FITNESS_WEIGHT_FLOOR;
            let wj = fitness.1 - low + FITNESS_WEIGHT_FLOOR;
            // Interpolated form so identical parents reproduce exactly.
            let t = wj / (wi + wj);
            phi_i.iter().zip(phi_j).map(|(a, b)| a + t * (b - a)).collect()
        }
    })
}

pub fn mutate<R: Rng + ?Sized>(phi: &[f64], sigma_mut: f64, rng: &mut R) -> Vec<f64> {
    if sigma_mut == 0.0 {
        return phi.to_vec();
    }
    phi.iter()
        .map(|&x| x + sigma_mut * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    pub genes: Vec<LatentGene>,
    pub master_index: usize,
    pub elite_count: usize,
    pub generation: u64,
    pub last_evolution_iteration: Option<u64>,
}

impl PopulationState {
    pub fn new(genes: Vec<LatentGene>, elite_count: usize) -> Self {
        PopulationState {
            genes,
            master_index: 1,
            elite_count,
            generation: 0,
            last_evolution_iteration: None,
        }
    }

    pub fn k(&self) -> usize {
        self.genes.len()
    }

    pub fn gene(&self, agent_id: usize) -> &LatentGene {
        &self.genes[agent_id - 1]
    }
}

/// Default elite count `K - 2`; `None` when the population is too small to
/// evolve (fewer than two elites plus one child).
pub fn default_elite_count(k: usize) -> Option<usize> {
    (k >= 4).then(|| k - 2)
}

pub fn validate_elite_count(k: usize, x: usize) -> Result<()> {
    if x < 2 || x + 2 > k {
        return Err(Error::config(
            "population.x_elites",
            format!("must lie in [2, K-2] = [2, {}] for K = {k}, got {x}", k as i64 - 2),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    pub parents: [usize; 2],
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionEvent {
    pub iteration: u64,
    pub trigger_lhs: f64,
    pub trigger_rhs: f64,
    pub elites: Vec<usize>,
    pub children: Vec<ChildRecord>,
}

impl EvolutionEvent {
    pub fn replaced(&self) -> Vec<usize> {
        self.children.iter().map(|c| c.slot).collect()
    }
}

/// Agent ids `2..=K` ranked by score descending, ties to the lower id.
pub fn rank_followers(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (2..scores.len() + 2).collect();
    ids.sort_by(|&a, &b| scores[b - 2].total_cmp(&scores[a - 2]).then(a.cmp(&b)));
    ids
}

/// One GA step. `scores[i]` belongs to agent `i + 2`. Elites keep their slots;
/// children fill the remaining follower slots in ascending id.
pub fn evolve<R: Rng + ?Sized>(
    pop: &PopulationState,
    scores: &[f64],
    crossover_strategy: Crossover,
    sigma_mut: f64,
    decision: TriggerDecision,
    iteration: u64,
    rng: &mut R,
) -> Result<(PopulationState, EvolutionEvent)> {
    let k = pop.k();
    validate_elite_count(k, pop.elite_count)?;
    if scores.len() != k - 1 {
        return Err(Error::shape("evolve scores", format!("{}", k - 1), format!("{}", scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: "fitness score".into(), index: i });
    }
    let ranked = rank_followers(scores);
    let elites: Vec<usize> = ranked[..pop.elite_count].to_vec();
    let mut replaced: Vec<usize> = ranked[pop.elite_count..].to_vec();
    replaced.sort_unstable();

    let mut next = pop.clone();
    let mut children = Vec::with_capacity(replaced.len());
    for &slot in &replaced {
        let pick = index::sample(rng, elites.len(), 2);
        let (a, b) = (elites[pick.index(0)], elites[pick.index(1)]);
        let child = crossover(
            &pop.gene(a).phi,
            &pop.gene(b).phi,
            crossover_strategy,
            (scores[a - 2], scores[b - 2]),
            rng,
        )?;
        next.genes[slot - 1].phi = mutate(&child, sigma_mut, rng);
        children.push(ChildRecord { parents: [a, b], slot });
    }
    next.generation += 1;
    next.last_evolution_iteration = Some(iteration);
    let event = EvolutionEvent {
        iteration,
        trigger_lhs: decision.lhs,
        trigger_rhs: decision.rhs,
        elites,
        children,
    };
    Ok((next, event))
}
