//! Desk-scale classifiers with a dual normalization layer at every
//! normalization site.
//!
//! * `mlp`: `[linear -> dual BN -> relu] x L -> linear head`
//! * `small_cnn`: `[conv kxk (pad k/2, no bias) -> dual BN -> relu (-> 2x2 avg pool)] x L
//!   -> global average pool -> linear head`
//!
//! Trunk layers carry no bias because a normalization layer follows them.
//! The parameter registry is ordered block by block (trunk weight, MBN gamma,
//! MBN beta, ABN gamma, ABN beta), then the head weight and bias.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::norm::{BnCall, BnNodes, DualNormLayer, Mode, Param, Route};
use crate::real::Real;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[channels, height, width]` of one input sample.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Hidden widths (MLP) or per-block output channels (CNN).
    pub widths: Vec<usize>,
    /// Zero-based CNN block indices followed by a 2x2 average pool.
    #[serde(default)]
    pub pool_after: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Fixed per-channel input standardization applied inside the model.
    #[serde(default)]
    pub input_mean: Option<Vec<f64>>,
    #[serde(default)]
    pub input_std: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_kernel() -> usize {
    3
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape: vec![input_dim, 1, 1],
            classes,
            widths: hidden.to_vec(),
            pool_after: vec![],
            kernel: default_kernel(),
            input_mean: None,
            input_std: None,
            seed,
        }
    }

    /// Default 4-block plan: channels `[8, 8, 16, 16]`, pool after block 2.
    pub fn small_cnn(input_shape: [usize; 3], classes: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::SmallCnn,
            input_shape: input_shape.to_vec(),
            classes,
            widths: vec![8, 8, 16, 16],
            pool_after: vec![1],
            kernel: default_kernel(),
            input_mean: None,
            input_std: None,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive".into());
        }
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return bad(format!("input_shape must be [c, h, w], got {:?}", self.input_shape));
        }
        let c_in = self.input_shape[0];
        for (name, v) in [("input_mean", &self.input_mean), ("input_std", &self.input_std)] {
            if let Some(v) = v {
                if v.len() != c_in {
                    return bad(format!("{name} needs {c_in} entries"));
                }
            }
        }
        if self.input_mean.is_some() != self.input_std.is_some() {
            return bad("input_mean and input_std must be given together".into());
        }
        if let Some(std) = &self.input_std {
            if std.iter().any(|&s| s <= 0.0) {
                return bad("input_std must be positive".into());
            }
        }
        if self.kind == ModelKind::SmallCnn {
            if self.kernel % 2 == 0 {
                return bad("kernel must be odd".into());
            }
            let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
            for &b in &self.pool_after {
                if b >= self.widths.len() {
                    return bad(format!("pool_after index {b} beyond {} blocks", self.widths.len()));
                }
                if h % 2 != 0 || w % 2 != 0 {
                    return bad(format!("cannot 2x2-pool a {h}x{w} map"));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// Closed-form trainable scalar count (both normalization states included).
    pub fn parameter_count(&self) -> usize {
        let first = match self.kind {
            ModelKind::Mlp => self.input_len(),
            ModelKind::SmallCnn => self.input_shape[0],
        };
        let k2 = match self.kind {
            ModelKind::Mlp => 1,
            ModelKind::SmallCnn => self.kernel * self.kernel,
        };
        let mut prev = first;
        let mut total = 0;
        for &w in &self.widths {
            total += prev * w * k2 + 4 * w;
            prev = w;
        }
        total + prev * self.classes + self.classes
    }

    /// Closed-form number of trainable tensors.
    pub fn parameter_tensor_count(&self) -> usize {
        5 * self.widths.len() + 2
    }

    /// Width of the penultimate feature vector.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Trunk<T> {
    Linear(Param<T>),
    Conv { weight: Param<T>, pad: usize },
}

impl<T> Trunk<T> {
    fn weight(&self) -> &Param<T> {
        match self {
            Trunk::Linear(w) | Trunk::Conv { weight: w, .. } => w,
        }
    }

    fn weight_mut(&mut self) -> &mut Param<T> {
        match self {
            Trunk::Linear(w) | Trunk::Conv { weight: w, .. } => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    trunk: Trunk<T>,
    norm: DualNormLayer<T>,
    pool: bool,
}

/// Sample-level forward/backward counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounters {
    pub forward: u64,
    pub backward: u64,
}

impl std::ops::Sub for PassCounters {
    type Output = PassCounters;

    fn sub(self, rhs: Self) -> Self {
        PassCounters {
            forward: self.forward - rhs.forward,
            backward: self.backward - rhs.backward,
        }
    }
}

/// Outcome of the optional per-forward isolation audit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IsolationAudit {
    pub main_passes: u64,
    pub aux_passes: u64,
    pub violations: u64,
}

/// How one forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOpts {
    pub route: Route,
    pub mode: Mode,
    /// Update running statistics of the routed state (train mode only).
    pub update_stats: bool,
    /// Bind parameters as gradient-requiring leaves.
    pub param_grads: bool,
}

impl ForwardOpts {
    pub fn train(route: Route) -> Self {
        Self {
            route,
            mode: Mode::Train,
            update_stats: true,
            param_grads: true,
        }
    }

    pub fn eval(route: Route) -> Self {
        Self {
            route,
            mode: Mode::Eval,
            update_stats: false,
            param_grads: false,
        }
    }

    /// Input-gradient-only pass (attack iterations).
    pub fn probe(route: Route, mode: Mode, update_stats: bool) -> Self {
        Self {
            route,
            mode,
            update_stats: update_stats && mode == Mode::Train,
            param_grads: false,
        }
    }
}

/// Handles into a graph produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: NodeId,
    pub features: NodeId,
    pub logits: NodeId,
    pub batch: usize,
    bindings: Vec<(usize, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    blocks: Vec<Block<T>>,
    head_w: Param<T>,
    head_b: Param<T>,
    input_scale: Option<(Vec<T>, Vec<T>)>,
    counters: PassCounters,
    audit: Option<IsolationAudit>,
}

fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

impl<T: Real> Model<T> {
    /// Deterministic construction from the spec seed; each ABN starts as a
    /// copy of its MBN.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(spec.seed, Stream::Init, 0);
        let mut blocks = Vec::with_capacity(spec.widths.len());
        let mut prev = match spec.kind {
            ModelKind::Mlp => spec.input_len(),
            ModelKind::SmallCnn => spec.input_shape[0],
        };
        for (i, &w) in spec.widths.iter().enumerate() {
            let trunk = match spec.kind {
                ModelKind::Mlp => Trunk::Linear(Param::new(kaiming_uniform(&[prev, w], prev, &mut rng))),
                ModelKind::SmallCnn => {
                    let k = spec.kernel;
                    let fan_in = prev * k * k;
                    Trunk::Conv {
                        weight: Param::new(kaiming_uniform(&[w, prev, k, k], fan_in, &mut rng)),
                        pad: k / 2,
                    }
                }
            };
            let mut norm = DualNormLayer::new(w);
            norm.clone_abn_from_mbn();
            blocks.push(Block {
                trunk,
                norm,
                pool: spec.kind == ModelKind::SmallCnn && spec.pool_after.contains(&i),
            });
            prev = w;
        }
        let head_w = Param::new(kaiming_uniform(&[prev, spec.classes], prev, &mut rng));
        let head_b = Param::new(Tensor::zeros(&[spec.classes]));
        let input_scale = match (&spec.input_mean, &spec.input_std) {
            (Some(m), Some(s)) => Some((
                s.iter().map(|&v| T::of(1.0 / v)).collect(),
                m.iter().zip(s).map(|(&m, &s)| T::of(-m / s)).collect(),
            )),
            _ => None,
        };
        Ok(Self {
            spec: spec.clone(),
            blocks,
            head_w,
            head_b,
            input_scale,
            counters: PassCounters::default(),
            audit: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn counters(&self) -> PassCounters {
        self.counters
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &DualNormLayer<T>> {
        self.blocks.iter().map(|b| &b.norm)
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut DualNormLayer<T>> {
        self.blocks.iter_mut().map(|b| &mut b.norm)
    }

    /// Snapshot the non-routed normalization state around every forward and
    /// count any change.
    pub fn enable_isolation_audit(&mut self) {
        self.audit = Some(IsolationAudit::default());
    }

    pub fn isolation_audit(&self) -> Option<IsolationAudit> {
        self.audit
    }

    /// Visits every trainable tensor in registry order.
    pub fn visit_params(&self, mut f: impl FnMut(usize, &str, &Param<T>)) {
        let mut idx = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            f(idx, &format!("blocks.{i}.weight"), b.trunk.weight());
            f(idx + 1, &format!("blocks.{i}.mbn.gamma"), &b.norm.mbn.gamma);
            f(idx + 2, &format!("blocks.{i}.mbn.beta"), &b.norm.mbn.beta);
            f(idx + 3, &format!("blocks.{i}.abn.gamma"), &b.norm.abn.gamma);
            f(idx + 4, &format!("blocks.{i}.abn.beta"), &b.norm.abn.beta);
            idx += 5;
        }
        f(idx, "head.weight", &self.head_w);
        f(idx + 1, "head.bias", &self.head_b);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &str, &mut Param<T>)) {
        let mut idx = 0;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(idx, &format!("blocks.{i}.weight"), b.trunk.weight_mut());
            f(idx + 1, &format!("blocks.{i}.mbn.gamma"), &mut b.norm.mbn.gamma);
            f(idx + 2, &format!("blocks.{i}.mbn.beta"), &mut b.norm.mbn.beta);
            f(idx + 3, &format!("blocks.{i}.abn.gamma"), &mut b.norm.abn.gamma);
            f(idx + 4, &format!("blocks.{i}.abn.beta"), &mut b.norm.abn.beta);
            idx += 5;
        }
        f(idx, "head.weight", &mut self.head_w);
        f(idx + 1, "head.bias", &mut self.head_b);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, p| n += p.value.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|_, _, p| p.grad = None);
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape[..] {
            return Err(shape_err(
                "model input",
                format!("expected (N, {:?}), got {s:?}", self.spec.input_shape),
            ));
        }
        Ok(())
    }

    /// Adds `x` as a leaf and runs the network on it.
    pub fn forward_input(
        &mut self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        input_grad: bool,
        opts: ForwardOpts,
    ) -> Result<ForwardPass> {
        self.check_input(x)?;
        let input = g.leaf(x.clone(), input_grad)?;
        self.forward(g, input, opts)
    }

    /// Runs the network on an existing node of shape (N, C, H, W).
    pub fn forward(&mut self, g: &mut Graph<T>, input: NodeId, opts: ForwardOpts) -> Result<ForwardPass> {
        let shape = g.shape(input)?.to_vec();
        if shape.len() != 4 || shape[1..] != self.spec.input_shape[..] {
            return Err(shape_err("model input", format!("{shape:?}")));
        }
        let batch = shape[0];
        let other = match opts.route {
            Route::Main => Route::Aux,
            Route::Aux => Route::Main,
        };
        let snapshot: Option<Vec<Vec<u64>>> = self
            .audit
            .map(|_| self.blocks.iter().map(|b| b.norm.state(other).bits()).collect());

        let call = BnCall {
            mode: opts.mode,
            update_stats: opts.update_stats && opts.mode == Mode::Train,
            param_grads: opts.param_grads,
        };
        let mut bindings = Vec::new();
        let mut h = input;
        if let Some((scale, shift)) = &self.input_scale {
            h = g.channel_affine(h, scale, shift)?;
        }
        if self.spec.kind == ModelKind::Mlp {
            h = g.flatten(h)?;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let base = 5 * i;
            let w = block.trunk.weight().bind(g, opts.param_grads)?;
            bindings.push((base, w));
            h = match &block.trunk {
                Trunk::Linear(_) => g.matmul(h, w)?,
                Trunk::Conv { pad, .. } => g.conv2d(h, w, *pad)?,
            };
            let BnNodes { out, gamma, beta } = block.norm.forward(g, h, opts.route, call)?;
            let off = match opts.route {
                Route::Main => 1,
                Route::Aux => 3,
            };
            bindings.push((base + off, gamma));
            bindings.push((base + off + 1, beta));
            h = g.relu(out)?;
            if block.pool {
                h = g.avg_pool2d(h, 2, 2)?;
            }
        }
        if self.spec.kind == ModelKind::SmallCnn {
            let s = g.shape(h)?.to_vec();
            h = g.avg_pool2d(h, s[2], s[3])?;
            h = g.flatten(h)?;
        }
        let features = h;
        let head_base = 5 * self.blocks.len();
        let hw = self.head_w.bind(g, opts.param_grads)?;
        let hb = self.head_b.bind(g, opts.param_grads)?;
        bindings.push((head_base, hw));
        bindings.push((head_base + 1, hb));
        let z = g.matmul(features, hw)?;
        let logits = g.add_bias(z, hb)?;

        self.counters.forward += batch as u64;
        if let (Some(audit), Some(before)) = (self.audit.as_mut(), snapshot) {
            match opts.route {
                Route::Main => audit.main_passes += 1,
                Route::Aux => audit.aux_passes += 1,
            }
            let changed = self
                .blocks
                .iter()
                .zip(&before)
                .any(|(b, bits)| b.norm.state(other).bits() != *bits);
            if changed {
                audit.violations += 1;
            }
        }
        Ok(ForwardPass {
            input,
            features,
            logits,
            batch,
            bindings,
        })
    }

    /// Backpropagates `loss` (after clearing any gradients already in `g`) and
    /// accumulates `scale * dloss/dparam` into the parameters bound by `pass`.
    /// The input gradient stays readable from `g` afterwards.
    pub fn backward(&mut self, g: &mut Graph<T>, pass: &ForwardPass, loss: NodeId, scale: T) -> Result<()> {
        g.zero_grad();
        g.backward(loss)?;
        self.counters.backward += pass.batch as u64;
        let grads: HashMap<usize, Tensor<T>> = pass
            .bindings
            .iter()
            .filter_map(|&(idx, node)| g.grad(node).map(|t| (idx, t)))
            .collect();
        if !grads.is_empty() {
            self.visit_params_mut(|idx, _, p| {
                if let Some(gr) = grads.get(&idx) {
                    p.accumulate(gr, scale);
                }
            });
        }
        Ok(())
    }

    /// Logits (N, C) for a batch.
    pub fn predict(&mut self, x: &Tensor<T>, route: Route, mode: Mode) -> Result<Tensor<T>> {
        let opts = ForwardOpts {
            route,
            mode,
            update_stats: mode == Mode::Train,
            param_grads: false,
        };
        let mut g = Graph::new();
        let pass = self.forward_input(&mut g, x, false, opts)?;
        Ok(g.value(pass.logits)?.clone())
    }

    /// Activations feeding the classifier head, shape (N, D).
    pub fn penultimate_features(&mut self, x: &Tensor<T>, route: Route, mode: Mode) -> Result<Tensor<T>> {
        let opts = ForwardOpts {
            route,
            mode,
            update_stats: mode == Mode::Train,
            param_grads: false,
        };
        let mut g = Graph::new();
        let pass = self.forward_input(&mut g, x, false, opts)?;
        Ok(g.value(pass.features)?.clone())
    }

    /// Named tensors of the full model state, including both statistic sets.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(|_, name, p| out.push((name.to_string(), p.value.clone())));
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, st) in [("mbn", &b.norm.mbn), ("abn", &b.norm.abn)] {
                let c = st.channels();
                for (field, v) in [("running_mean", &st.running_mean), ("running_var", &st.running_var)] {
                    out.push((
                        format!("blocks.{i}.{tag}.{field}"),
                        Tensor::new(vec![c], v.clone()).expect("channel vector"),
                    ));
                }
            }
        }
        out
    }

    /// Inverse of [`Model::named_tensors`] on a freshly built model.
    pub fn load_named_tensors(&mut self, tensors: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mut err = None;
        self.visit_params_mut(|_, name, p| {
            if err.is_some() {
                return;
            }
            match tensors.get(name) {
                Some(t) if t.shape() == p.value.shape() => {
                    p.value = t.clone();
                    p.grad = None;
                }
                Some(t) => err = Some(shape_err("checkpoint", format!("{name}: {:?} vs {:?}", t.shape(), p.value.shape()))),
                None => err = Some(invalid(format!("checkpoint is missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, st) in [("mbn", &mut b.norm.mbn), ("abn", &mut b.norm.abn)] {
                for (field, dst) in [("running_mean", &mut st.running_mean), ("running_var", &mut st.running_var)] {
                    let name = format!("blocks.{i}.{tag}.{field}");
                    let t = tensors
                        .get(&name)
                        .ok_or_else(|| invalid(format!("checkpoint is missing tensor {name}")))?;
                    if t.len() != dst.len() {
                        return Err(shape_err("checkpoint", name));
                    }
                    dst.copy_from_slice(t.data());
                }
            }
        }
        Ok(())
    }
}
