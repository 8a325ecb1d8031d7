//! Evolutionary policy optimization: a population of latent-conditioned
//! agents sharing one actor-critic, trained with PPO plus an off-policy
//! master update and a genetic algorithm over the latent genes.

pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod evolution;
pub mod losses;
pub mod metrics;
pub mod normalize;
pub mod policy;
pub mod rollout;
pub mod run;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
