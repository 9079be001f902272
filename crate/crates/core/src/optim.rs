//! Adam with bias correction, linear learning-rate warmup, and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{ParamError, ParamSet};
use crate::tensor::Scalar;

/// Linear warmup to `base_lr` over `warmup_steps`, constant afterwards:
/// `lr(t) = base_lr * min(1, t / warmup_steps)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 3e-4, warmup_steps: 16_000 }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let w = self.warmup_steps.max(1) as f64;
        self.base_lr * (step as f64 / w).min(1.0)
    }
}

/// Adam moment estimates, one pair of buffers per parameter, in the
/// parameter set's declaration order.
pub struct AdamState<F: Scalar> {
    step: u64,
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let first_moment = params.iter().map(|(_, t)| vec![F::ZERO; t.numel()]).collect();
        let second_moment = params.iter().map(|(_, t)| vec![F::ZERO; t.numel()]).collect();
        AdamState {
            step: 0,
            first_moment,
            second_moment,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update at the scheduled learning rate `lr(state.step + 1)`.
/// `grads` must hold one gradient per parameter in declaration order.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    schedule: &LrSchedule,
) -> Result<(), ParamError> {
    if grads.len() != params.len() {
        let name = params
            .iter()
            .nth(grads.len())
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| "<extra gradient>".to_string());
        return Err(ParamError::MissingGradient(name));
    }
    let t = state.step + 1;
    let lr = schedule.lr(t);
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let one_minus_b1 = F::from_f64(1.0 - state.beta1);
    let one_minus_b2 = F::from_f64(1.0 - state.beta2);
    let corr1 = F::from_f64(1.0 - state.beta1.powi(t as i32));
    let corr2 = F::from_f64(1.0 - state.beta2.powi(t as i32));
    let eps = F::from_f64(state.epsilon);
    let lr_f = F::from_f64(lr);

    for (idx, (name, tensor)) in params.iter_mut().enumerate() {
        let g = &grads[idx];
        if g.len() != tensor.numel() {
            return Err(ParamError::MissingGradient(name.to_string()));
        }
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        let data = tensor.data_mut();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + one_minus_b1 * g[i];
            v[i] = b2 * v[i] + one_minus_b2 * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            data[i] = data[i] - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
    norm
}
