//! ℓ∞ projected gradient ascent on the input, with an optional free first
//! step that reuses an input gradient computed elsewhere.
//!
//! Budgets are given in units of 1/255 of the `[0, 1]` input range.

use serde::{Deserialize, Serialize};

use crate::augment::Targets;
use crate::error::{invalid, shape_err, Result};
use crate::graph::{sign, Graph};
use crate::model::{ForwardOpts, Model};
use crate::norm::{Mode, Route};
use crate::real::Real;
use crate::tensor::Tensor;

pub const PIXEL: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Number of ascent steps.
    pub n: usize,
    /// ℓ∞ radius in 1/255 units.
    pub epsilon: f64,
    /// Step size in 1/255 units.
    pub alpha: f64,
    /// Take the first step from a supplied gradient instead of a fresh pass.
    pub free_first_step: bool,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("attack needs n >= 1 steps"));
        }
        if !(self.epsilon >= 0.0 && self.alpha >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("attack epsilon and alpha must be non-negative"));
        }
        if self.alpha > self.epsilon {
            return Err(invalid(format!(
                "attack step alpha = {} exceeds epsilon = {}",
                self.alpha, self.epsilon
            )));
        }
        Ok(())
    }

    /// Additional (forward, backward) batch passes this attack performs.
    pub fn extra_passes(&self) -> (u64, u64) {
        let p = if self.free_first_step { self.n - 1 } else { self.n } as u64;
        (p, p)
    }
}

/// `(epsilon, alpha)` for a free attack of `n` steps: `(n + 1, 1)` for
/// `n >= 2` and `(1, 1)` for `n = 1`.
pub fn epsilon_schedule(n: usize) -> Result<(f64, f64)> {
    match n {
        0 => Err(invalid("attack needs n >= 1 steps")),
        1 => Ok((1.0, 1.0)),
        n => Ok(((n + 1) as f64, 1.0)),
    }
}

/// Which route and normalization mode attack iterations run through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackRoute {
    pub route: Route,
    pub mode: Mode,
    /// Let attack iterations update running statistics (train mode only).
    pub update_stats: bool,
}

impl AttackRoute {
    /// Auxiliary route, batch statistics, running statistics left alone.
    pub fn aux_train() -> Self {
        Self {
            route: Route::Aux,
            mode: Mode::Train,
            update_stats: false,
        }
    }

    /// Main route with running statistics (evaluation attacks).
    pub fn main_eval() -> Self {
        Self {
            route: Route::Main,
            mode: Mode::Eval,
            update_stats: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome<T> {
    pub x_adv: Tensor<T>,
    /// Batch-level forward passes performed inside the attack.
    pub forwards: u64,
    pub backwards: u64,
}

/// Gradient of the targets' mean loss with respect to the input.
pub fn input_gradient<T: Real>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    targets: &Targets,
    route: AttackRoute,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let opts = ForwardOpts::probe(route.route, route.mode, route.update_stats);
    let pass = model.forward_input(&mut g, x, true, opts)?;
    let loss = targets.loss(&mut g, pass.logits)?;
    model.backward(&mut g, &pass, loss, T::one())?;
    g.grad(pass.input)
        .ok_or_else(|| invalid("input gradient missing after backward"))
}

/// Projected gradient ascent from `x0`:
/// `delta <- clip(delta + alpha * sign(grad), -eps, eps)`,
/// `x_adv = clamp(x0 + delta, 0, 1)`.
///
/// With `free_first_step`, step one uses `seed_grad` and costs no model pass.
pub fn pgd<T: Real>(
    model: &mut Model<T>,
    x0: &Tensor<T>,
    targets: &Targets,
    cfg: &AttackConfig,
    route: AttackRoute,
    seed_grad: Option<&Tensor<T>>,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    if x0.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(invalid("attack input outside [0, 1]"));
    }
    if targets.len() != x0.rows() {
        return Err(shape_err("pgd", format!("{} targets for {} inputs", targets.len(), x0.rows())));
    }
    if cfg.free_first_step {
        match seed_grad {
            None => return Err(invalid("free first step requires a seed gradient")),
            Some(s) if s.shape() != x0.shape() => {
                return Err(shape_err("pgd", format!("seed gradient {:?} vs input {:?}", s.shape(), x0.shape())))
            }
            _ => {}
        }
    }
    let eps = T::of(cfg.epsilon * PIXEL);
    let step = T::of(cfg.alpha * PIXEL);
    let mut delta = vec![T::zero(); x0.len()];
    let mut x_adv = x0.clone();
    let mut out = AttackOutcome {
        x_adv: x0.clone(),
        forwards: 0,
        backwards: 0,
    };
    for i in 0..cfg.n {
        let grad = if i == 0 && cfg.free_first_step {
            seed_grad.expect("checked above").clone()
        } else {
            out.forwards += 1;
            out.backwards += 1;
            input_gradient(model, &x_adv, targets, route)?
        };
        for (((d, &gv), xa), &x) in delta.iter_mut().zip(grad.data()).zip(x_adv.data_mut()).zip(x0.data()) {
            *d = (*d + step * sign(gv)).max(-eps).min(eps);
            *xa = (x + *d).max(T::zero()).min(T::one());
        }
    }
    out.x_adv = x_adv;
    Ok(out)
}
