//! Adaptive-moment optimizer with linear warmup and exponential decay.

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Steps after warmup over which the learning rate halves.
    pub decay_half_life: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 3e-3,
            warmup_steps: 100,
            decay_half_life: 1000.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    /// Learning rate applied at zero-based `step`: `peak * (step + 1) / warmup`
    /// during warmup, then `peak * 0.5^((step - warmup) / half_life)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let since = (step - self.warmup_steps) as f64;
            self.peak_lr * 0.5f64.powf(since / self.decay_half_life)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { lr: f64, grad_norm: f64 },
    /// The gradient had a non-finite entry; nothing was changed.
    Skipped { grad_norm: f64 },
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: OptimConfig,
    m: Params<T>,
    v: Params<T>,
    step: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(config: OptimConfig, params: &Params<T>) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) -> StepOutcome {
        let grad_norm = grads.sq_norm().sqrt();
        if !grad_norm.is_finite() {
            return StepOutcome::Skipped { grad_norm };
        }
        let cfg = &self.config;
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let clip = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            cfg.grad_clip / grad_norm
        } else {
            1.0
        };
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(cfg.eps);
        let decay = T::lit(lr * cfg.weight_decay);
        let clip = T::lit(clip);
        let params_t = params.tensors_mut();
        let grads_t = grads.tensors();
        let m_t = self.m.tensors_mut();
        let v_t = self.v.tensors_mut();
        for (((( _, p), (_, g)), (_, m)), (_, v)) in params_t.into_iter().zip(grads_t).zip(m_t).zip(v_t) {
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                let old = p.data[i];
                p.data[i] = old - step_size * m.data[i] / denom - decay * old;
            }
        }
        StepOutcome::Applied { lr, grad_norm }
    }
}
