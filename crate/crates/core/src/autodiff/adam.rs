use std::collections::BTreeMap;

use super::tape::Gradients;
use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Linear warm-up length in steps; 0 disables warm-up.
    pub warmup: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup: 10_000,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Learning rate applied at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup == 0 {
            return self.lr;
        }
        self.lr * (t as f64 / self.warmup as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("Adam eps must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update on every trainable parameter that has a gradient.
///
/// Frozen parameters and parameters without a gradient are left untouched,
/// including by weight decay.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        for moments in [&state.m, &state.v] {
            if let Some(mv) = moments.get(name) {
                if mv.len() != p.numel() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("`{name}`: moment length {} vs {}", mv.len(), p.numel()),
                    ));
                }
            }
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }

    state.step += 1;
    let t = state.step;
    let lr = cfg.lr_at(t);
    let bc1 = 1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32);

    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        if !p.requires_grad() {
            continue;
        }
        let n = p.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}
