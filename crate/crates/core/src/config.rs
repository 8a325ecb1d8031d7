//! Training configuration: one validated record with JSON I/O and dotted-key
//! overrides (`population.K=8`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envs::Task;
use crate::error::{Error, Result};
use crate::evolution::{self, Crossover, EvolutionSettings, TriggerMode};
use crate::tensor::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task: Task,
    pub num_envs: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { task: Task::Pendulum, num_envs: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N_lat")]
    pub n_lat: usize,
    /// `None` means `K - 2`.
    pub x_elites: Option<usize>,
    pub sigma_mut: f64,
    pub gamma_trigger: f64,
    pub trigger_mode: TriggerMode,
    /// Only read in `fixed_interval` mode; `None` never evolves.
    pub interval: Option<u64>,
    pub cooldown: u64,
    pub crossover: Crossover,
    pub fitness_window: usize,
    pub fitness_min_episodes: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            k: 8,
            n_lat: 32,
            x_elites: None,
            sigma_mut: 0.1,
            gamma_trigger: 0.5,
            trigger_mode: TriggerMode::FitnessGap,
            interval: None,
            cooldown: 10,
            crossover: Crossover::Average,
            fitness_window: 10,
            fitness_min_episodes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub eps_clip: f64,
    pub horizon: usize,
    pub mini_epochs: usize,
    /// `None` means `4 * num_envs`.
    pub minibatch_size: Option<usize>,
    pub critic_coef: f64,
    pub entropy_coef: f64,
    pub bounds_coef: f64,
    pub bounds_limit: f64,
    pub lambda_off: f64,
    pub n_step: usize,
    /// Critic predicts standardized returns (running statistics of targets).
    pub normalize_value: bool,
    /// Bootstrap through step-limit endings instead of treating them as terminal.
    pub bootstrap_timeouts: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda_gae: 0.95,
            eps_clip: 0.1,
            horizon: 16,
            mini_epochs: 2,
            minibatch_size: None,
            critic_coef: 4.0,
            entropy_coef: 0.0,
            bounds_coef: 1e-5,
            bounds_limit: 1.1,
            lambda_off: 1.0,
            n_step: 3,
            normalize_value: true,
            bootstrap_timeouts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub lr: f64,
    pub kl_threshold: f64,
    pub max_grad_norm: f64,
    pub adaptive_lr: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { lr: 1e-4, kl_threshold: 0.016, max_grad_norm: 1.0, adaptive_lr: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferConfig {
    pub chunks: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig { chunks: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { hidden: vec![64, 64], activation: Activation::Elu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub total_env_steps: u64,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    /// Periodic checkpoint interval in iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub eval_episodes: usize,
    pub label: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            total_env_steps: 2_000_000,
            out_dir: None,
            threads: 1,
            checkpoint_every: 0,
            eval_episodes: 10,
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub population: PopulationConfig,
    pub ppo: PpoConfig,
    pub opt: OptConfig,
    pub buffer: BufferConfig,
    pub network: NetworkConfig,
    pub run: RunConfig,
}

fn positive(key: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

impl TrainConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::config(json_error_key(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are parsed as JSON, falling back
    /// to a bare string. Keys must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = self.to_value();
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
            set_dotted(&mut tree, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: TrainConfig = serde_json::from_value(tree).map_err(|e| {
            let key = overrides
                .first()
                .map(|o| o.as_ref().split('=').next().unwrap_or("").to_string())
                .unwrap_or_default();
            Error::config(if overrides.len() == 1 { key } else { json_error_key(&e) }, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn batch_size(&self) -> usize {
        self.ppo.horizon * self.env.num_envs
    }

    pub fn minibatch_size(&self) -> usize {
        self.ppo.minibatch_size.unwrap_or(4 * self.env.num_envs)
    }

    pub fn num_minibatches(&self) -> usize {
        self.batch_size() / self.minibatch_size()
    }

    pub fn envs_per_agent(&self) -> usize {
        self.env.num_envs / self.population.k
    }

    /// Elite count in effect; `None` when evolution cannot run.
    pub fn elite_count(&self) -> Option<usize> {
        match self.population.x_elites {
            Some(x) => Some(x),
            None => evolution::default_elite_count(self.population.k),
        }
    }

    pub fn evolution_enabled(&self) -> bool {
        let off = self.population.trigger_mode == TriggerMode::FixedInterval
            && self.population.interval.is_none_or(|i| i == 0);
        self.population.k >= 4 && !off && self.elite_count().is_some()
    }

    pub fn evolution_settings(&self) -> Option<EvolutionSettings> {
        if !self.evolution_enabled() {
            return None;
        }
        Some(EvolutionSettings {
            elite_count: self.elite_count()?,
            sigma_mut: self.population.sigma_mut,
            crossover: self.population.crossover,
            gamma_trigger: self.population.gamma_trigger,
            trigger_mode: self.population.trigger_mode,
            interval: self.population.interval,
            cooldown: self.population.cooldown,
        })
    }

    pub fn iterations(&self) -> u64 {
        let per = self.batch_size() as u64;
        self.run.total_env_steps.div_ceil(per)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.population;
        let o = &self.ppo;
        positive("env.num_envs", self.env.num_envs > 0, "must be positive")?;
        positive("population.K", p.k > 0, "must be at least 1")?;
        if self.env.num_envs % p.k != 0 {
            return Err(Error::config(
                "env.num_envs",
                format!("{} is not divisible by population.K = {}", self.env.num_envs, p.k),
            ));
        }
        if let Some(x) = p.x_elites {
            evolution::validate_elite_count(p.k, x).map_err(|e| match e {
                Error::Config { message, .. } => Error::config("population.x_elites", message),
                other => other,
            })?;
        }
        positive("population.sigma_mut", p.sigma_mut >= 0.0 && p.sigma_mut.is_finite(), "must be finite and >= 0")?;
        positive("population.gamma_trigger", p.gamma_trigger >= 0.0 && p.gamma_trigger.is_finite(), "must be finite and >= 0")?;
        positive("population.fitness_window", p.fitness_window > 0, "must be positive")?;
        positive(
            "population.fitness_min_episodes",
            p.fitness_min_episodes <= p.fitness_window,
            "cannot exceed population.fitness_window",
        )?;
        positive("ppo.gamma", (0.0..=1.0).contains(&o.gamma), "must lie in [0, 1]")?;
        positive("ppo.lambda_gae", (0.0..=1.0).contains(&o.lambda_gae), "must lie in [0, 1]")?;
        positive("ppo.eps_clip", o.eps_clip > 0.0 && o.eps_clip < 1.0, "must lie in (0, 1)")?;
        positive("ppo.horizon", o.horizon > 0, "must be positive")?;
        positive("ppo.mini_epochs", o.mini_epochs > 0, "must be positive")?;
        positive("ppo.n_step", o.n_step > 0, "must be positive")?;
        let mb = self.minibatch_size();
        if mb == 0 || self.batch_size() % mb != 0 {
            return Err(Error::config(
                "ppo.minibatch_size",
                format!("{mb} does not divide the on-policy batch of {}", self.batch_size()),
            ));
        }
        for (key, v) in [
            ("ppo.critic_coef", o.critic_coef),
            ("ppo.entropy_coef", o.entropy_coef),
            ("ppo.bounds_coef", o.bounds_coef),
            ("ppo.lambda_off", o.lambda_off),
        ] {
            positive(key, v.is_finite() && v >= 0.0, "must be finite and >= 0")?;
        }
        positive("ppo.bounds_limit", o.bounds_limit > 0.0, "must be positive")?;
        positive("opt.lr", self.opt.lr > 0.0 && self.opt.lr.is_finite(), "must be positive")?;
        positive("opt.kl_threshold", self.opt.kl_threshold > 0.0, "must be positive")?;
        positive("opt.max_grad_norm", self.opt.max_grad_norm > 0.0, "must be positive")?;
        positive("buffer.chunks", self.buffer.chunks > 0, "must be positive")?;
        positive("network.hidden", !self.network.hidden.is_empty() && self.network.hidden.iter().all(|&h| h > 0), "needs at least one positive layer width")?;
        positive("run.total_env_steps", self.run.total_env_steps > 0, "must be positive")?;
        positive("run.threads", self.run.threads > 0, "must be positive")?;
        Ok(())
    }
}

fn json_error_key(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::config(key, "does not name a config section"))?;
        let slot = map.get_mut(*part).ok_or_else(|| Error::config(key, "unknown config key"))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::config(key, "names a section, not a value"));
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::config(key, "empty key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_json_str(r#"{"population": {"K": 4}, "env": {"num_envs": 64}}"#).unwrap();
        assert_eq!(partial.population.k, 4);
        assert_eq!(partial.ppo.horizon, 16);
    }

    #[test]
    fn overrides_parse_and_name_bad_keys() {
        let cfg = TrainConfig::default()
            .with_overrides(&["population.K=1", "env.task=multigoal_reacher", "population.crossover=uniform"])
            .unwrap();
        assert_eq!(cfg.population.k, 1);
        assert_eq!(cfg.env.task, Task::MultigoalReacher);
        assert_eq!(cfg.population.crossover, Crossover::Uniform);
        match TrainConfig::default().with_overrides(&["ppo.nope=3"]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "ppo.nope"),
            other => panic!("{other:?}"),
        }
        match TrainConfig::default().with_overrides(&["population.K=3"]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "env.num_envs"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::default().with_overrides(&["population.K=abc"]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in ["ppo.eps_clip=1.5", "ppo.minibatch_size=100", "population.x_elites=7", "opt.lr=0"] {
            assert!(TrainConfig::default().with_overrides(&[bad]).is_err(), "{bad}");
        }
        let unknown = TrainConfig::from_json_str(r#"{"ppo": {"horizn": 3}}"#);
        assert!(matches!(unknown, Err(Error::Config { .. })));
    }

    #[test]
    fn evolution_switches() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.evolution_enabled());
        assert_eq!(cfg.elite_count(), Some(6));
        cfg.population.trigger_mode = TriggerMode::FixedInterval;
        assert!(!cfg.evolution_enabled());
        cfg.population.interval = Some(5);
        assert!(cfg.evolution_enabled());
        cfg.population.k = 2;
        assert!(!cfg.evolution_enabled());
    }
}
