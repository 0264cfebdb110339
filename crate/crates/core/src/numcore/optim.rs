use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::math;
use super::params::Params;
use super::tensor::Tensor;

/// Adam hyperparameters plus the clipping/warmup schedule used by training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0, warmup_steps: 100 }
    }
}

/// First/second moment buffers, indexed like the parameter store.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        let m: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Clips the gradient norm, applies warmup, then takes one Adam step.
    /// Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut Params, cfg: &AdamConfig) -> f64 {
        let norm = params.grad_norm();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let warm = if cfg.warmup_steps > 0 {
            (self.step as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        adam_step_scaled(params, &mut self.m, &mut self.v, cfg.lr * warm, cfg.beta1, cfg.beta2, cfg.eps, self.step, clip);
        norm
    }
}

/// One bias-corrected Adam update on every parameter, in name order.
///
/// `step` is 1-based. Moment buffers are created on first use.
pub fn adam_step(
    params: &mut Params,
    m: &mut Vec<Tensor>,
    v: &mut Vec<Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
) {
    adam_step_scaled(params, m, v, lr, beta1, beta2, eps, step, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn adam_step_scaled(
    params: &mut Params,
    m: &mut Vec<Tensor>,
    v: &mut Vec<Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    grad_scale: f64,
) {
    if m.len() != params.len() {
        *m = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        *v = m.clone();
    }
    let bc1 = 1.0 - math::pow(beta1, step as f64);
    let bc2 = 1.0 - math::pow(beta2, step as f64);
    let ids: Vec<_> = params.ids_by_name().collect();
    for id in ids {
        let p = params.get_mut(id);
        let (mi, vi) = (&mut m[id.0], &mut v[id.0]);
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for (((w, &g), mm), vv) in value.iter_mut().zip(grad).zip(mi.data_mut()).zip(vi.data_mut()) {
            let g = g * grad_scale;
            *mm = beta1 * *mm + (1.0 - beta1) * g;
            *vv = beta2 * *vv + (1.0 - beta2) * g * g;
            let mhat = *mm / bc1;
            let vhat = *vv / bc2;
            *w -= lr * mhat / (math::sqrt(vhat) + eps);
        }
    }
}
