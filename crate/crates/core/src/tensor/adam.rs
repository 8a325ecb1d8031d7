use serde::{Deserialize, Serialize};

use crate::error::{first_non_finite, Error, Result};

/// First/second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global L2 norm of the raw gradient.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1.0 when not clipped).
    pub clip_scale: f64,
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> StepStats {
    let grad_norm = l2_norm(grads);
    let clip_scale = if grad_norm > max_norm {
        max_norm / grad_norm
    } else {
        1.0
    };
    if clip_scale != 1.0 {
        for g in grads.iter_mut() {
            *g *= clip_scale;
        }
    }
    StepStats {
        grad_norm,
        clip_scale,
    }
}

/// One bias-corrected Adam update after global-norm clipping.
///
/// Parameters are left untouched when any gradient entry is non-finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    max_grad_norm: f64,
) -> Result<StepStats> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            params.len(),
            format!("grads {}, m {}, v {}", grads.len(), state.m.len(), state.v.len()),
        ));
    }
    if let Some(index) = first_non_finite(grads) {
        return Err(Error::NonFinite {
            context: "gradient".into(),
            index,
        });
    }
    let mut g = grads.to_vec();
    let stats = clip_grad_norm(&mut g, max_grad_norm);

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps_adam);
    }
    Ok(stats)
}
