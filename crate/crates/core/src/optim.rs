//! Learning-rate schedules and optimizers.
//!
//! The one-cycle policy warms the learning rate from `eta_initial` to
//! `eta_max` over the first `warmup_steps` with a half-cosine, then anneals
//! to `eta_min` over the remainder. Momentum follows the companion cosine
//! between `beta_initial` and `beta_max`, rising during warmup and falling
//! back during the anneal. Optimizers re-apply pruning masks after every
//! update so pruned entries stay exactly zero.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycleConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub eta_initial: f64,
    pub eta_max: f64,
    pub eta_min: f64,
    pub beta_initial: f64,
    pub beta_max: f64,
}

pub const DEFAULT_BETA_INITIAL: f64 = 0.85;
pub const DEFAULT_BETA_MAX: f64 = 0.95;

impl OneCycleConfig {
    pub fn new(
        total_steps: usize,
        warmup_steps: usize,
        eta_initial: f64,
        eta_max: f64,
        eta_min: f64,
    ) -> Result<Self> {
        let cfg = OneCycleConfig {
            total_steps,
            warmup_steps,
            eta_initial,
            eta_max,
            eta_min,
            beta_initial: DEFAULT_BETA_INITIAL,
            beta_max: DEFAULT_BETA_MAX,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_betas(mut self, beta_initial: f64, beta_max: f64) -> Result<Self> {
        self.beta_initial = beta_initial;
        self.beta_max = beta_max;
        self.validate()?;
        Ok(self)
    }

    /// Warmup over 10% of the total steps, at least one step.
    pub fn with_default_warmup(
        total_steps: usize,
        eta_initial: f64,
        eta_max: f64,
        eta_min: f64,
    ) -> Result<Self> {
        let warmup = ((total_steps as f64 * 0.1).floor() as usize).max(1);
        OneCycleConfig::new(total_steps, warmup, eta_initial, eta_max, eta_min)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Param(format!(
                "one-cycle warmup {} must lie strictly inside total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, v) in [
            ("eta_initial", self.eta_initial),
            ("eta_max", self.eta_max),
            ("eta_min", self.eta_min),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Param(format!("one-cycle {name} must be positive, got {v}")));
            }
        }
        if self.eta_initial > self.eta_max || self.eta_min > self.eta_max {
            return Err(Error::Param(format!(
                "one-cycle wants eta_min, eta_initial <= eta_max, got ({}, {}, {})",
                self.eta_min, self.eta_initial, self.eta_max
            )));
        }
        for (name, v) in [("beta_initial", self.beta_initial), ("beta_max", self.beta_max)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Param(format!("one-cycle {name} must be in [0,1), got {v}")));
            }
        }
        Ok(())
    }
}

fn check_step(cfg: &OneCycleConfig, i: usize) -> Result<()> {
    if i > cfg.total_steps {
        return Err(Error::Param(format!("one-cycle step {i} outside [0, {}]", cfg.total_steps)));
    }
    Ok(())
}

/// Learning rate at step `i` of the one-cycle policy.
pub fn one_cycle_lr(cfg: &OneCycleConfig, i: usize) -> Result<f64> {
    check_step(cfg, i)?;
    let (t, l) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    Ok(if i <= cfg.warmup_steps {
        let phase = i as f64 / t * PI;
        cfg.eta_max + (cfg.eta_initial - cfg.eta_max) / 2.0 * (1.0 + phase.cos())
    } else {
        let phase = (i as f64 - t) / (l - t) * PI;
        cfg.eta_min + (cfg.eta_max - cfg.eta_min) / 2.0 * (1.0 + phase.cos())
    })
}

/// Momentum at step `i` of the one-cycle policy; rises with the learning
/// rate to `beta_max` during warmup and returns to `beta_initial`.
pub fn one_cycle_momentum(cfg: &OneCycleConfig, i: usize) -> Result<f64> {
    check_step(cfg, i)?;
    let (t, l) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    Ok(if i <= cfg.warmup_steps {
        let phase = i as f64 / t * PI;
        cfg.beta_max + (cfg.beta_initial - cfg.beta_max) / 2.0 * (1.0 + phase.cos())
    } else {
        let phase = (i as f64 - t) / (l - t) * PI;
        cfg.beta_initial + (cfg.beta_max - cfg.beta_initial) / 2.0 * (1.0 + phase.cos())
    })
}

pub fn one_cycle_pair(cfg: &OneCycleConfig, i: usize) -> Result<(f64, f64)> {
    Ok((one_cycle_lr(cfg, i)?, one_cycle_momentum(cfg, i)?))
}

/// Piecewise-constant baseline schedule: `base` for the first half of
/// training, `base/10` until three quarters, `base/100` after.
pub fn step_schedule_lr(base: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if !(base > 0.0) || !base.is_finite() {
        return Err(Error::Param(format!("step schedule base lr must be positive, got {base}")));
    }
    if total_epochs == 0 || epoch >= total_epochs {
        return Err(Error::Param(format!(
            "step schedule epoch {epoch} outside [0, {total_epochs})"
        )));
    }
    Ok(if 2 * epoch < total_epochs {
        base
    } else if 4 * epoch < 3 * total_epochs {
        base / 10.0
    } else {
        base / 100.0
    })
}

fn check_finite(name: &str, grad: &[f64]) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    Ok(())
}

fn masked(mask: Option<&[u8]>, j: usize) -> bool {
    mask.map(|m| m[j] == 0).unwrap_or(false)
}

/// SGD with classical momentum and coupled weight decay:
/// `v <- momentum*v + (grad + wd*param)`, `param <- param - lr*v`.
#[derive(Debug, Default)]
pub struct SgdMomentum {
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(weight_decay: f64) -> Self {
        SgdMomentum { weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(
        &mut self,
        name: &str,
        lr: f64,
        momentum: f64,
        param: &mut [f64],
        grad: &[f64],
        mask: Option<&[u8]>,
    ) -> Result<()> {
        if grad.len() != param.len() || mask.map(|m| m.len() != param.len()).unwrap_or(false) {
            return Err(Error::Shape(format!(
                "optimizer buffers for {name} disagree: param {}, grad {}",
                param.len(),
                grad.len()
            )));
        }
        check_finite(name, grad)?;
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        if v.len() != param.len() {
            return Err(Error::Shape(format!("stale velocity buffer for {name}")));
        }
        for j in 0..param.len() {
            if masked(mask, j) {
                v[j] = 0.0;
                param[j] = 0.0;
                continue;
            }
            v[j] = momentum * v[j] + (grad[j] + self.weight_decay * param[j]);
            param[j] -= lr * v[j];
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug)]
pub struct AdaptiveMoment {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: BTreeMap<String, u32>,
}

impl AdaptiveMoment {
    pub fn new(weight_decay: f64) -> Self {
        AdaptiveMoment {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        name: &str,
        lr: f64,
        param: &mut [f64],
        grad: &[f64],
        mask: Option<&[u8]>,
    ) -> Result<()> {
        if grad.len() != param.len() || mask.map(|m| m.len() != param.len()).unwrap_or(false) {
            return Err(Error::Shape(format!(
                "optimizer buffers for {name} disagree: param {}, grad {}",
                param.len(),
                grad.len()
            )));
        }
        check_finite(name, grad)?;
        let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        if m.len() != param.len() || v.len() != param.len() {
            return Err(Error::Shape(format!("stale moment buffers for {name}")));
        }
        let t = self.steps.entry(name.to_string()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - self.beta1.powi(*t as i32);
        let bc2 = 1.0 - self.beta2.powi(*t as i32);
        for j in 0..param.len() {
            if masked(mask, j) {
                m[j] = 0.0;
                v[j] = 0.0;
                param[j] = 0.0;
                continue;
            }
            let g = grad[j] + self.weight_decay * param[j];
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            param[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
