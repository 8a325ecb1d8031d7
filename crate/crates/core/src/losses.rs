//! Surrogate objectives, critic losses, and their combination.
//!
//! Surrogates are objectives (to be maximized). The scalar handed to the
//! optimizer is `LossBreakdown::total`, which is minimized:
//!
//! ```text
//! total = -(on + lambda * off) + c_critic * (critic_on + lambda * critic_off)
//!         - c_ent * entropy + bounds
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A surrogate value with its gradient with respect to the new log-densities.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub objective: f64,
    pub clip_fraction: f64,
    /// `mean(behavior - new)`; only meaningful on-policy.
    pub approx_kl: f64,
    /// `d objective / d new_log_prob[i]` (zero for dropped records).
    pub grad: Vec<f64>,
    /// Records excluded for non-finite ratios.
    pub dropped: usize,
}

/// `(min(r A, clip(r, lo, hi) A), d/d log r, clipped)`.
#[inline]
fn clipped_term(ratio: f64, lo: f64, hi: f64, adv: f64) -> (f64, f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(lo, hi) * adv;
    let outside = ratio < lo || ratio > hi;
    if unclipped <= clipped {
        (unclipped, unclipped, outside)
    } else {
        (clipped, 0.0, outside)
    }
}

fn check_lengths(context: &str, lens: &[usize]) -> Result<()> {
    if lens.iter().any(|&l| l != lens[0]) {
        return Err(Error::shape(context, "aligned arrays", format!("{lens:?}")));
    }
    Ok(())
}

/// Clipped surrogate with `r = exp(new - behavior)`.
pub fn on_policy_surrogate(
    new_log_probs: &[f64],
    behavior_log_probs: &[f64],
    advantages: &[f64],
    eps_clip: f64,
) -> Result<Surrogate> {
    check_lengths(
        "on_policy_surrogate",
        &[new_log_probs.len(), behavior_log_probs.len(), advantages.len()],
    )?;
    let n = new_log_probs.len();
    let mut grad = vec![0.0; n];
    if n == 0 {
        return Ok(Surrogate { objective: 0.0, clip_fraction: 0.0, approx_kl: 0.0, grad, dropped: 0 });
    }
    let (lo, hi) = (1.0 - eps_clip, 1.0 + eps_clip);
    let mut sum = 0.0;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    for i in 0..n {
        let ratio = (new_log_probs[i] - behavior_log_probs[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite { context: "on-policy ratio".into(), index: i });
        }
        let (v, g, c) = clipped_term(ratio, lo, hi, advantages[i]);
        sum += v;
        grad[i] = g;
        clipped += c as usize;
        kl += behavior_log_probs[i] - new_log_probs[i];
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(Surrogate {
        objective: sum * inv,
        clip_fraction: clipped as f64 * inv,
        approx_kl: kl * inv,
        grad,
        dropped: 0,
    })
}

/// Importance-corrected surrogate for the master on follower data.
///
/// `r = exp(master - behavior)`, `mu = exp(master_old - behavior)`, and the
/// clip interval is `[mu (1 - eps), mu (1 + eps)]`. Records with a non-finite
/// `r` or `mu` are dropped and counted.
pub fn off_policy_surrogate(
    master_log_probs: &[f64],
    master_old_log_probs: &[f64],
    behavior_log_probs: &[f64],
    advantages: &[f64],
    eps_clip: f64,
) -> Result<Surrogate> {
    check_lengths(
        "off_policy_surrogate",
        &[
            master_log_probs.len(),
            master_old_log_probs.len(),
            behavior_log_probs.len(),
            advantages.len(),
        ],
    )?;
    let n = master_log_probs.len();
    let mut grad = vec![0.0; n];
    let mut sum = 0.0;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    let mut kept = 0usize;
    for i in 0..n {
        let ratio = (master_log_probs[i] - behavior_log_probs[i]).exp();
        let mu = (master_old_log_probs[i] - behavior_log_probs[i]).exp();
        if !ratio.is_finite() || !mu.is_finite() || !advantages[i].is_finite() {
            continue;
        }
        let (v, g, c) = clipped_term(ratio, mu * (1.0 - eps_clip), mu * (1.0 + eps_clip), advantages[i]);
        sum += v;
        grad[i] = g;
        clipped += c as usize;
        kl += behavior_log_probs[i] - master_log_probs[i];
        kept += 1;
    }
    if kept == 0 {
        return Ok(Surrogate { objective: 0.0, clip_fraction: 0.0, approx_kl: 0.0, grad, dropped: n });
    }
    let inv = 1.0 / kept as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(Surrogate {
        objective: sum * inv,
        clip_fraction: clipped as f64 * inv,
        approx_kl: kl * inv,
        grad,
        dropped: n - kept,
    })
}

/// Mean squared error and its gradient with respect to `values`.
pub fn mse(values: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths("critic loss", &[values.len(), targets.len()])?;
    if values.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / values.len() as f64;
    let mut loss = 0.0;
    let grad = values
        .iter()
        .zip(targets)
        .map(|(v, t)| {
            let d = v - t;
            loss += d * d;
            2.0 * d * inv
        })
        .collect();
    Ok((loss * inv, grad))
}

/// On-policy critic loss; targets are constants.
pub fn critic_loss_on(values: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    mse(values, targets)
}

/// Off-policy critic loss of the master on the sampled follower batch.
pub fn critic_loss_off(master_values: &[f64], one_step_targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    mse(master_values, one_step_targets)
}

/// Loss components before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub on_policy_actor: f64,
    pub off_policy_actor: f64,
    pub critic_on: f64,
    pub critic_off: f64,
    pub entropy: f64,
    pub bounds: f64,
    pub clip_fraction_on: f64,
    pub clip_fraction_off: f64,
    pub approx_kl: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub on_policy_actor: f64,
    pub off_policy_actor: f64,
    pub critic_on: f64,
    pub critic_off: f64,
    pub entropy: f64,
    pub bounds: f64,
    pub total: f64,
    pub clip_fraction_on: f64,
    pub clip_fraction_off: f64,
    pub approx_kl: f64,
}

impl LossBreakdown {
    /// Recomputes `total` from the stored parts.
    pub fn recompute_total(&self, lambda_off: f64, critic_coef: f64, entropy_coef: f64) -> f64 {
        weighted_total(
            self.on_policy_actor,
            self.off_policy_actor,
            self.critic_on,
            self.critic_off,
            self.entropy,
            self.bounds,
            lambda_off,
            critic_coef,
            entropy_coef,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn weighted_total(
    on: f64,
    off: f64,
    c_on: f64,
    c_off: f64,
    entropy: f64,
    bounds: f64,
    lambda_off: f64,
    critic_coef: f64,
    entropy_coef: f64,
) -> f64 {
    let mut total = -(on + lambda_off * off) + critic_coef * (c_on + lambda_off * c_off) + bounds;
    if entropy_coef != 0.0 {
        total -= entropy_coef * entropy;
    }
    total
}

pub fn combine(parts: &LossParts, lambda_off: f64, critic_coef: f64, entropy_coef: f64) -> Result<LossBreakdown> {
    let named = [
        parts.on_policy_actor,
        parts.off_policy_actor,
        parts.critic_on,
        parts.critic_off,
        parts.entropy,
        parts.bounds,
    ];
    if let Some(index) = named.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "loss part".into(), index });
    }
    let total = weighted_total(
        parts.on_policy_actor,
        parts.off_policy_actor,
        parts.critic_on,
        parts.critic_off,
        parts.entropy,
        parts.bounds,
        lambda_off,
        critic_coef,
        entropy_coef,
    );
    Ok(LossBreakdown {
        on_policy_actor: parts.on_policy_actor,
        off_policy_actor: parts.off_policy_actor,
        critic_on: parts.critic_on,
        critic_off: parts.critic_off,
        entropy: parts.entropy,
        bounds: parts.bounds,
        total,
        clip_fraction_on: parts.clip_fraction_on,
        clip_fraction_off: parts.clip_fraction_off,
        approx_kl: parts.approx_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp_for_ratio(r: f64) -> (f64, f64) {
        (r.ln(), 0.0)
    }

    #[test]
    fn on_policy_examples() {
        let s = on_policy_surrogate(&[-0.3], &[-0.3], &[2.0], 0.1).unwrap();
        assert_eq!(s.objective, 2.0);
        assert_eq!(s.clip_fraction, 0.0);

        let (new, old) = lp_for_ratio(1.5);
        let s = on_policy_surrogate(&[new], &[old], &[1.0], 0.1).unwrap();
        assert!((s.objective - 1.1).abs() < 1e-12);
        assert_eq!(s.grad, vec![0.0]);
        assert_eq!(s.clip_fraction, 1.0);

        let s = on_policy_surrogate(&[new], &[old], &[-1.0], 0.1).unwrap();
        assert!((s.objective + 1.5).abs() < 1e-12);
        assert!((s.grad[0] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_on_policy_ratio_reports_index() {
        let err = on_policy_surrogate(&[0.0, 800.0], &[0.0, 0.0], &[1.0, 1.0], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn off_policy_examples() {
        // r = 2.0, mu = 1.5
        let s = off_policy_surrogate(&[2.0f64.ln()], &[1.5f64.ln()], &[0.0], &[1.0], 0.1).unwrap();
        assert!((s.objective - 1.65).abs() < 1e-12);
        // r = 1.2, mu = 1.5, A = -1
        let s = off_policy_surrogate(&[1.2f64.ln()], &[1.5f64.ln()], &[0.0], &[-1.0], 0.1).unwrap();
        assert!((s.objective + 1.35).abs() < 1e-12);
        assert_eq!(s.grad, vec![0.0]);
    }

    #[test]
    fn off_policy_drops_non_finite_records() {
        let s = off_policy_surrogate(&[0.0, 900.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.1).unwrap();
        assert_eq!(s.dropped, 1);
        assert_eq!(s.objective, 1.0);
        assert_eq!(s.grad[1], 0.0);
    }

    #[test]
    fn critic_loss_examples() {
        assert_eq!(critic_loss_on(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(critic_loss_on(&[1.0, 3.0], &[0.0, 0.0]).unwrap().0, 5.0);
        let (a, _) = critic_loss_off(&[0.5, -1.0], &[0.1, 0.2]).unwrap();
        let (b, _) = critic_loss_off(&[3.5, 2.0], &[3.1, 3.2]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(critic_loss_on(&[1.0], &[]).is_err());
    }

    #[test]
    fn combine_examples() {
        let parts = LossParts {
            on_policy_actor: 1.0,
            off_policy_actor: 2.0,
            critic_on: 0.5,
            critic_off: 0.25,
            ..Default::default()
        };
        let b = combine(&parts, 1.0, 4.0, 0.0).unwrap();
        assert_eq!(b.total, 0.0);
        let zero_lambda = combine(&parts, 0.0, 4.0, 0.0).unwrap();
        let other = combine(&LossParts { off_policy_actor: -7.0, critic_off: 9.0, ..parts }, 0.0, 4.0, 0.0).unwrap();
        assert_eq!(zero_lambda.total, other.total);
        let with_entropy = combine(&LossParts { entropy: 123.0, ..parts }, 1.0, 4.0, 0.0).unwrap();
        assert_eq!(with_entropy.total, b.total);
        assert!(combine(&LossParts { bounds: f64::NAN, ..parts }, 1.0, 4.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn off_policy_reduces_to_on_policy_when_mu_is_one(
            rows in prop::collection::vec((-2.0f64..0.0, -0.3f64..0.3, -3.0f64..3.0), 1..64),
            eps in 0.05f64..0.3,
        ) {
            let behavior: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let new: Vec<f64> = rows.iter().map(|r| r.0 + r.1).collect();
            let adv: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let on = on_policy_surrogate(&new, &behavior, &adv, eps).unwrap();
            let off = off_policy_surrogate(&new, &behavior, &behavior, &adv, eps).unwrap();
            prop_assert!((on.objective - off.objective).abs() <= 1e-12);
            prop_assert_eq!(on.clip_fraction, off.clip_fraction);
        }

        #[test]
        fn ratio_and_advantage_scaling_invariances(
            rows in prop::collection::vec((-2.0f64..0.0, -0.3f64..0.3, -3.0f64..3.0), 1..32),
            shift in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let behavior: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let new: Vec<f64> = rows.iter().map(|r| r.0 + r.1).collect();
            let adv: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let base = on_policy_surrogate(&new, &behavior, &adv, 0.1).unwrap();
            let b2: Vec<f64> = behavior.iter().map(|b| b + shift).collect();
            let n2: Vec<f64> = new.iter().map(|n| n + shift).collect();
            let shifted = on_policy_surrogate(&n2, &b2, &adv, 0.1).unwrap();
            prop_assert!((base.objective - shifted.objective).abs() < 1e-9);
            let a2: Vec<f64> = adv.iter().map(|a| a * scale).collect();
            let scaled = on_policy_surrogate(&new, &behavior, &a2, 0.1).unwrap();
            prop_assert!((scaled.objective - scale * base.objective).abs() < 1e-9 * scale.max(1.0));
            let off = off_policy_surrogate(&new, &behavior, &b2, &adv, 0.1).unwrap();
            let off_scaled = off_policy_surrogate(&new, &behavior, &b2, &a2, 0.1).unwrap();
            prop_assert!((off_scaled.objective - scale * off.objective).abs() < 1e-9 * scale.max(1.0));
        }
    }
}
