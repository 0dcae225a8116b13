//! SGD with momentum, Adam, and learning-rate schedules.
//!
//! Parameters whose gradient is `None` (never reached by a backward pass in
//! the current step) are skipped entirely, including weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing from the base rate to zero over the run, per epoch.
    Cosine,
    /// Multiply by `gamma` at each listed epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("invalid Adam hyperparameters");
        }
        if let LrSchedule::Step { gamma, .. } = self.schedule {
            if !(gamma > 0.0) {
                return bad("step gamma must be positive");
            }
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (zero-based) of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        match &self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let e = epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / e).cos())
            }
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.lr * gamma.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    slots: Vec<Slot<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, slots: Vec::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update with learning rate `lr` and clears all gradients.
    pub fn step(&mut self, model: &mut Model<T>, lr: f64) {
        let cfg = &self.cfg;
        let slots = &mut self.slots;
        let (lr, wd, mu) = (T::of(lr), T::of(cfg.weight_decay), T::of(cfg.momentum));
        let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.adam_eps));
        model.visit_params_mut(|idx, _, p| {
            let Some(grad) = p.grad.take() else { return };
            if slots.len() <= idx {
                slots.resize_with(idx + 1, Slot::default);
            }
            let slot = &mut slots[idx];
            let w = p.value.data_mut();
            let g = grad.data();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    let first = slot.m.is_empty();
                    if first {
                        slot.m = vec![T::zero(); w.len()];
                    }
                    for ((w, &g), b) in w.iter_mut().zip(g).zip(slot.m.iter_mut()) {
                        let d = g + wd * *w;
                        *b = if first { d } else { mu * *b + d };
                        *w -= lr * *b;
                    }
                }
                OptimizerKind::Adam => {
                    if slot.m.is_empty() {
                        slot.m = vec![T::zero(); w.len()];
                        slot.v = vec![T::zero(); w.len()];
                    }
                    slot.steps += 1;
                    let c1 = T::one() - b1.powi(slot.steps);
                    let c2 = T::one() - b2.powi(slot.steps);
                    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(slot.m.iter_mut()).zip(slot.v.iter_mut()) {
                        let d = g + wd * *w;
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        });
    }
}
