//! Latent-conditioned Gaussian actor-critic shared by every agent.
//!
//! Both trunks read `[obs ‖ phi]`, so an agent's behaviour is a function of
//! the shared weights and its gene only. The policy is a diagonal Gaussian
//! with a state-independent, learned `log_std`.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{first_non_finite, Error, Result};
use crate::tensor::{Activation, Mat, MlpSpec, ParamVector};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Per-agent latent embedding. `agent_id` is 1-based; agent 1 is the master.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGene {
    pub agent_id: usize,
    pub phi: Vec<f64>,
}

impl LatentGene {
    /// `phi ~ N(0, I)`.
    pub fn random<R: Rng + ?Sized>(agent_id: usize, dim: usize, rng: &mut R) -> Self {
        LatentGene {
            agent_id,
            phi: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// One sampled (or mean) action with its log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAction {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub sample: Vec<f64>,
    pub log_prob: f64,
}

/// Shared network parameters: actor trunk, critic trunk, and `log_std`,
/// stored contiguously in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticParams {
    vector: ParamVector,
    actor: Range<usize>,
    critic: Range<usize>,
    log_std: Range<usize>,
}

impl ActorCriticParams {
    pub fn actor(&self) -> &[f64] {
        &self.vector.values()[self.actor.clone()]
    }

    pub fn critic(&self) -> &[f64] {
        &self.vector.values()[self.critic.clone()]
    }

    pub fn log_std(&self) -> &[f64] {
        &self.vector.values()[self.log_std.clone()]
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        let r = self.log_std.clone();
        &mut self.vector.values_mut()[r]
    }

    pub fn actor_range(&self) -> Range<usize> {
        self.actor.clone()
    }

    pub fn critic_range(&self) -> Range<usize> {
        self.critic.clone()
    }

    pub fn log_std_range(&self) -> Range<usize> {
        self.log_std.clone()
    }

    pub fn values(&self) -> &[f64] {
        self.vector.values()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.vector.values_mut()
    }

    pub fn vector(&self) -> &ParamVector {
        &self.vector
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn clamp_log_std(&mut self) {
        for v in self.log_std_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((&m, &ls), &a) in mean.iter().zip(log_std).zip(x) {
        let z = (a - m) / ls.exp();
        lp += -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln();
    }
    lp
}

/// Differential entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (1.0 + (2.0 * PI).ln())).sum()
}

/// `coef * mean(max(|mean| - limit, 0)^2)` over all rows and dims.
pub fn bounds_loss(action_means: &Mat, limit: f64, coef: f64) -> f64 {
    let n = action_means.data().len();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = action_means
        .data()
        .iter()
        .map(|m| {
            let e = (m.abs() - limit).max(0.0);
            e * e
        })
        .sum();
    coef * s / n as f64
}

/// Gradient of [`bounds_loss`] with respect to each mean.
pub fn bounds_loss_grad(action_means: &Mat, limit: f64, coef: f64) -> Mat {
    let n = action_means.data().len().max(1) as f64;
    let mut g = action_means.clone();
    for v in g.data_mut() {
        let e = (v.abs() - limit).max(0.0);
        *v = coef * 2.0 * e * v.signum() / n;
    }
    g
}

/// Network definition for the shared actor-critic.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub actor: MlpSpec,
    pub critic: MlpSpec,
}

impl ActorCritic {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::config("net.hidden", "at least one hidden layer"));
        }
        let input = obs_dim + latent_dim;
        Ok(ActorCritic {
            obs_dim,
            action_dim,
            latent_dim,
            actor: MlpSpec::new(input, hidden.to_vec(), action_dim, activation)?,
            critic: MlpSpec::new(input, hidden.to_vec(), 1, activation)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.latent_dim
    }

    /// Fresh parameters: scaled-uniform trunks, actor output layer at 0.01
    /// scale, `log_std = 0`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ActorCriticParams {
        let actor = self.actor.init_params(rng, 0.01);
        let critic = self.critic.init_params(rng, 1.0);
        let log_std = vec![0.0; self.action_dim];
        self.assemble(&actor, &critic, &log_std)
            .expect("layout derived from this spec")
    }

    pub fn assemble(&self, actor: &[f64], critic: &[f64], log_std: &[f64]) -> Result<ActorCriticParams> {
        let mut v = ParamVector::new();
        let mut push = |spec: &MlpSpec, prefix: &str, values: &[f64]| -> Result<Range<usize>> {
            if values.len() != spec.param_count() {
                return Err(Error::shape(format!("{prefix} params"), spec.param_count(), values.len()));
            }
            let start = v.len();
            let mut off = 0;
            for (name, shape) in spec.block_names(prefix) {
                let n: usize = shape.iter().product();
                v.push_block(&name, &shape, &values[off..off + n])?;
                off += n;
            }
            Ok(start..v.len())
        };
        let actor_r = push(&self.actor, "actor", actor)?;
        let critic_r = push(&self.critic, "critic", critic)?;
        if log_std.len() != self.action_dim {
            return Err(Error::shape("log_std", self.action_dim, log_std.len()));
        }
        let start = v.len();
        v.push_block("log_std", &[self.action_dim], log_std)?;
        Ok(ActorCriticParams {
            vector: v,
            actor: actor_r,
            critic: critic_r,
            log_std: start..start + self.action_dim,
        })
    }

    /// Rebuilds parameters from a flat vector laid out as by [`Self::assemble`].
    pub fn params_from_flat(&self, flat: &[f64]) -> Result<ActorCriticParams> {
        let a = self.actor.param_count();
        let c = self.critic.param_count();
        if flat.len() != a + c + self.action_dim {
            return Err(Error::shape("actor-critic flat params", a + c + self.action_dim, flat.len()));
        }
        self.assemble(&flat[..a], &flat[a..a + c], &flat[a + c..])
    }

    fn check_obs(&self, obs: &Mat) -> Result<()> {
        if obs.cols() != self.obs_dim {
            return Err(Error::shape("observation", self.obs_dim, obs.cols()));
        }
        if let Some(index) = first_non_finite(obs.data()) {
            return Err(Error::NonFinite {
                context: "observation".into(),
                index,
            });
        }
        Ok(())
    }

    fn check_gene(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.latent_dim {
            return Err(Error::shape("latent gene", self.latent_dim, phi.len()));
        }
        Ok(())
    }

    /// Concatenates `[obs_row ‖ phi_row]` with one gene per row.
    pub fn build_input_rows(&self, obs: &Mat, genes: &[&[f64]]) -> Result<Mat> {
        self.check_obs(obs)?;
        if genes.len() != obs.rows() {
            return Err(Error::shape("gene rows", obs.rows(), genes.len()));
        }
        let mut input = Mat::zeros(obs.rows(), self.input_dim());
        for (r, phi) in genes.iter().enumerate() {
            self.check_gene(phi)?;
            let row = input.row_mut(r);
            row[..self.obs_dim].copy_from_slice(obs.row(r));
            row[self.obs_dim..].copy_from_slice(phi);
        }
        Ok(input)
    }

    /// Concatenates `[obs_row ‖ phi]` with one gene for all rows.
    pub fn build_input(&self, obs: &Mat, phi: &[f64]) -> Result<Mat> {
        let genes = vec![phi; obs.rows()];
        self.build_input_rows(obs, &genes)
    }

    pub fn action_means(&self, params: &ActorCriticParams, gene: &LatentGene, obs: &Mat) -> Result<Mat> {
        let input = self.build_input(obs, &gene.phi)?;
        Ok(self.actor.forward(params.actor(), &input)?.0)
    }

    /// Samples one action per row. `rng = None` returns the mean action.
    pub fn act<R: Rng + ?Sized>(
        &self,
        params: &ActorCriticParams,
        gene: &LatentGene,
        obs: &Mat,
        mut rng: Option<&mut R>,
    ) -> Result<Vec<GaussianAction>> {
        let means = self.action_means(params, gene, obs)?;
        let log_std = params.log_std().to_vec();
        let mut out = Vec::with_capacity(obs.rows());
        for mean in means.row_iter() {
            let sample: Vec<f64> = match rng.as_deref_mut() {
                Some(r) => mean
                    .iter()
                    .zip(&log_std)
                    .map(|(m, ls)| {
                        let eps: f64 = r.sample(StandardNormal);
                        m + ls.exp() * eps
                    })
                    .collect(),
                None => mean.to_vec(),
            };
            let log_prob = gaussian_log_prob(mean, &log_std, &sample);
            out.push(GaussianAction {
                mean: mean.to_vec(),
                log_std: log_std.clone(),
                sample,
                log_prob,
            });
        }
        Ok(out)
    }

    /// Log-densities of `actions` and the (state-independent) entropy.
    pub fn log_prob_and_entropy(
        &self,
        params: &ActorCriticParams,
        gene: &LatentGene,
        obs: &Mat,
        actions: &Mat,
    ) -> Result<(Vec<f64>, f64)> {
        if actions.rows() != obs.rows() || actions.cols() != self.action_dim {
            return Err(Error::shape(
                "actions",
                format!("{}x{}", obs.rows(), self.action_dim),
                format!("{}x{}", actions.rows(), actions.cols()),
            ));
        }
        let means = self.action_means(params, gene, obs)?;
        let log_std = params.log_std();
        let lps = means
            .row_iter()
            .zip(actions.row_iter())
            .map(|(m, a)| gaussian_log_prob(m, log_std, a))
            .collect();
        Ok((lps, gaussian_entropy(log_std)))
    }

    pub fn value(&self, params: &ActorCriticParams, gene: &LatentGene, obs: &Mat) -> Result<Vec<f64>> {
        let input = self.build_input(obs, &gene.phi)?;
        Ok(self.critic.forward(params.critic(), &input)?.0.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(obs: usize, act: usize, lat: usize) -> ActorCritic {
        ActorCritic::new(obs, act, lat, &[8, 8], Activation::Elu).unwrap()
    }

    fn random_obs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mean_action_density_at_mode() {
        let n = net(3, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = n.init_params(&mut rng);
        let gene = LatentGene::random(1, 4, &mut rng);
        let obs = random_obs(&mut rng, 2, 3);
        let acts = n.act::<ChaCha8Rng>(&params, &gene, &obs, None).unwrap();
        for a in acts {
            assert_eq!(a.sample, a.mean);
            assert!((a.log_prob - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_density_and_entropy_two_dims() {
        let m = [0.3, -0.2];
        assert!((gaussian_log_prob(&m, &[0.0, 0.0], &m) + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((gaussian_entropy(&[0.0, 0.0]) - 2.837_877_066_409_345).abs() < 1e-12);
        let shifted = gaussian_entropy(&[0.7, 0.7]);
        assert!((shifted - gaussian_entropy(&[0.0, 0.0]) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn identical_genes_identical_means_and_swaps_follow_genes() {
        let n = net(3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = n.init_params(&mut rng);
        let g1 = LatentGene::random(1, 4, &mut rng);
        let g2 = LatentGene::random(2, 4, &mut rng);
        let obs = random_obs(&mut rng, 5, 3);
        let same = LatentGene { agent_id: 2, phi: g1.phi.clone() };
        assert_eq!(n.action_means(&params, &g1, &obs).unwrap(), n.action_means(&params, &same, &obs).unwrap());
        // swapping genes swaps behaviour
        let swapped1 = LatentGene { agent_id: 1, phi: g2.phi.clone() };
        assert_eq!(n.action_means(&params, &swapped1, &obs).unwrap(), n.action_means(&params, &g2, &obs).unwrap());
    }

    #[test]
    fn row_permutation_permutes_outputs() {
        let n = net(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = n.init_params(&mut rng);
        let gene = LatentGene::random(1, 2, &mut rng);
        let obs = random_obs(&mut rng, 4, 3);
        let perm = [2, 0, 3, 1];
        let base = n.action_means(&params, &gene, &obs).unwrap();
        let permuted = n.action_means(&params, &gene, &obs.select_rows(&perm)).unwrap();
        assert_eq!(permuted, base.select_rows(&perm));
    }

    #[test]
    fn zero_critic_and_gene_dependence() {
        let n = net(2, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = n.init_params(&mut rng);
        let gene = LatentGene::random(1, 3, &mut rng);
        let obs = random_obs(&mut rng, 3, 2);
        let v = n.value(&params, &gene, &obs).unwrap();
        let mut other = gene.clone();
        other.phi[1] += 0.5;
        let v2 = n.value(&params, &other, &obs).unwrap();
        assert!(v.iter().zip(&v2).all(|(a, b)| a != b));

        let r = params.critic_range();
        params.values_mut()[r].iter_mut().for_each(|p| *p = 0.0);
        assert!(n.value(&params, &gene, &obs).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bounds_loss_examples() {
        let inside = Mat::from_vec(2, 2, vec![0.5, -1.1, 1.0, 0.0]).unwrap();
        assert_eq!(bounds_loss(&inside, 1.1, 1e-5), 0.0);
        let one = Mat::from_vec(1, 1, vec![1.6]).unwrap();
        assert!((bounds_loss(&one, 1.1, 1e-5) - 2.5e-6).abs() < 1e-18);
        assert!((bounds_loss(&one, 1.1, 2e-5) - 2.0 * bounds_loss(&one, 1.1, 1e-5)).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_obs() {
        let n = net(2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = n.init_params(&mut rng);
        let gene = LatentGene::random(1, 1, &mut rng);
        assert!(n.value(&params, &gene, &Mat::zeros(1, 3)).is_err());
        let bad = Mat::from_vec(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(n.act(&params, &gene, &bad, Some(&mut rng)).is_err());
        let short = LatentGene { agent_id: 1, phi: vec![] };
        assert!(n.value(&params, &short, &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn density_integrates_to_one_monte_carlo() {
        // E_{x~U(-L, L)}[p(x)] * 2L ~ 1 for a unit-dim Gaussian
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mean, ls) = (0.3, -0.4f64);
        let half = 8.0 * ls.exp();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = rng.random_range(mean - half..mean + half);
            acc += gaussian_log_prob(&[mean], &[ls], &[x]).exp();
        }
        let integral = acc / n as f64 * 2.0 * half;
        assert!((integral - 1.0).abs() < 0.02, "{integral}");
    }
}
