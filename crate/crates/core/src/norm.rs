//! Batch normalization with running statistics and the dual (main/auxiliary)
//! normalization layer.
//!
//! A [`DualNormLayer`] holds two complete [`BnState`]s. Every forward is routed
//! to exactly one of them; the other is neither read nor written.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Which normalization state a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Main,
    Aux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
///
/// `grad` is `None` until some backward pass reaches the parameter; optimizers
/// skip parameters without a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { value, grad: None }
    }

    pub fn accumulate(&mut self, g: &Tensor<T>, scale: T) {
        match &mut self.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b * scale),
            None => self.grad = Some(g.map(|v| v * scale)),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<NodeId> {
        g.leaf(self.value.clone(), requires_grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    /// Number of running-statistic updates applied so far (not persisted).
    pub updates: u64,
}

/// Graph nodes created by one normalization call.
#[derive(Debug, Clone, Copy)]
pub struct BnNodes {
    pub out: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Per-call options for a normalization forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnCall {
    pub mode: Mode,
    /// Apply the running-statistic update (train mode only).
    pub update_stats: bool,
    /// Bind gamma/beta as gradient-requiring leaves.
    pub param_grads: bool,
}

impl BnCall {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            update_stats: true,
            param_grads: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            update_stats: false,
            param_grads: false,
        }
    }
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_hyper(channels, T::of(DEFAULT_MOMENTUM), T::of(DEFAULT_EPS))
    }

    pub fn with_hyper(channels: usize, momentum: T, eps: T) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes `x` (N, C, ...). Train mode uses batch statistics (biased
    /// variance) and, if requested, folds them into the running estimates
    /// with the unbiased variance. Eval mode uses the running estimates.
    pub fn forward(&mut self, g: &mut Graph<T>, x: NodeId, call: BnCall) -> Result<BnNodes> {
        let shape = g.shape(x)?.to_vec();
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(shape_err(
                "batch_norm",
                format!("input {shape:?} for {} channels", self.channels()),
            ));
        }
        let gamma = self.gamma.bind(g, call.param_grads)?;
        let beta = self.beta.bind(g, call.param_grads)?;
        let out = match call.mode {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(invalid("batch norm in train mode needs at least 2 samples"));
                }
                let (out, moments) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                if call.update_stats {
                    let m = self.momentum;
                    let keep = T::one() - m;
                    let bessel = T::of(moments.count as f64 / (moments.count as f64 - 1.0));
                    for c in 0..self.channels() {
                        self.running_mean[c] = keep * self.running_mean[c] + m * moments.mean[c];
                        self.running_var[c] =
                            keep * self.running_var[c] + m * moments.var[c] * bessel;
                    }
                    self.updates += 1;
                }
                out
            }
            Mode::Eval => {
                g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)?
            }
        };
        Ok(BnNodes { out, gamma, beta })
    }

    /// Pulls gamma/beta gradients out of a graph after backward.
    pub fn collect_grads(&mut self, g: &Graph<T>, nodes: &BnNodes, scale: T) {
        if let Some(dg) = g.grad(nodes.gamma) {
            self.gamma.accumulate(&dg, scale);
        }
        if let Some(db) = g.grad(nodes.beta) {
            self.beta.accumulate(&db, scale);
        }
    }

    /// Bit patterns of every stored value, for isolation audits.
    pub fn bits(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for part in [
            self.gamma.value.data(),
            self.beta.value.data(),
            &self.running_mean,
            &self.running_var,
        ] {
            out.extend(part.iter().map(|v| v.as_f64().to_bits()));
        }
        out.push(self.momentum.as_f64().to_bits());
        out.push(self.eps.as_f64().to_bits());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualNormLayer<T> {
    pub mbn: BnState<T>,
    pub abn: BnState<T>,
}

impl<T: Real> DualNormLayer<T> {
    /// A fresh layer whose ABN starts as a copy of the MBN.
    pub fn new(channels: usize) -> Self {
        let mbn = BnState::new(channels);
        Self {
            abn: mbn.clone(),
            mbn,
        }
    }

    pub fn state(&self, route: Route) -> &BnState<T> {
        match route {
            Route::Main => &self.mbn,
            Route::Aux => &self.abn,
        }
    }

    pub fn state_mut(&mut self, route: Route) -> &mut BnState<T> {
        match route {
            Route::Main => &mut self.mbn,
            Route::Aux => &mut self.abn,
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        route: Route,
        call: BnCall,
    ) -> Result<BnNodes> {
        self.state_mut(route).forward(g, x, call)
    }

    /// Resets the auxiliary state to a deep copy of the main state.
    pub fn clone_abn_from_mbn(&mut self) {
        self.abn = self.mbn.clone();
        self.abn.updates = 0;
    }
}
