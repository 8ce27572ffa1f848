use serde::{Deserialize, Serialize};

use super::ParamMut;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Plain SGD with L2 weight decay and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_decays: u32,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { base_lr: 0.001, decay_factor: 5.0, decay_every: 100, max_decays: 5, weight_decay: 0.0001 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.decay_factor > 0.0 && self.decay_every > 0 && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("invalid SGD configuration {self:?}")));
        }
        Ok(())
    }
}

/// `base_lr / decay_factor^min(⌊epoch/decay_every⌋, max_decays)`
pub fn lr_at_epoch(cfg: &SgdConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.decay_every).min(cfg.max_decays as usize) as i32;
    cfg.base_lr / cfg.decay_factor.powi(steps)
}

/// `p ← p − lr·(g + decay·p)`, decay only where the tensor is flagged. All
/// gradients are checked before any parameter moves.
pub fn apply_sgd<F: Scalar>(params: &mut [ParamMut<'_, F>], grads: &[&[F]], lr: F, weight_decay: F) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} parameter tensors, {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.values.len() != g.len() {
            return Err(Error::shape(format!("parameter '{}' has {} values, gradient {}", p.name, p.values.len(), g.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient for '{}' at {i}", p.name)));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let wd = if p.decays { weight_decay } else { F::zero() };
        for (v, &gi) in p.values.iter_mut().zip(g.iter()) {
            *v -= lr * (gi + wd * *v);
        }
    }
    Ok(())
}

pub fn sgd_step<F: Scalar>(params: &mut [ParamMut<'_, F>], grads: &[&[F]], cfg: &SgdConfig, epoch: usize) -> Result<()> {
    apply_sgd(params, grads, F::lit(lr_at_epoch(cfg, epoch)), F::lit(cfg.weight_decay))
}
