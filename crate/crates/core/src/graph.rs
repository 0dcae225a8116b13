//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so node ids are
//! already a topological order. Values are retained until [`Graph::release`]
//! so gradients can be taken more than once (e.g. reusing the clean-pass
//! input gradient for an attack step).
//!
//! Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grad`]; intermediate gradients are dropped as soon as they
//! have been propagated.

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ChannelLayout, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom },
    AvgPool2d { x: NodeId, kh: usize, kw: usize },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Clip { x: NodeId, lo: T, hi: T },
    Sign,
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Nll { logp: NodeId, labels: Vec<usize> },
    Mean(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    ChannelAffine { x: NodeId, scale: Vec<T> },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Clip { .. } => "clip",
            Op::Sign => "sign",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Nll { .. } => "nll",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph in checked mode: any non-finite value is an error.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A leaf that does not take gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| invalid(format!("unknown node {}", id.0)))?
            .value
            .as_ref()
            .ok_or(Error::BackwardBeforeForward(id.0))
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize]> {
        Ok(self.value(id)?.shape())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(|n| n.requires_grad)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let g = self.grads.get(id.0)?.as_ref()?;
        let shape = self.nodes[id.0].value.as_ref()?.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Drops every retained non-leaf activation.
    pub fn release(&mut self) {
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.value = None;
            }
            if let Op::BatchNorm { xhat, .. } = &mut n.op {
                *xhat = Vec::new();
            }
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.requires_grad(i))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, T::one(), av.data(), k as isize, 1, bv.data(), m as isize, 1, T::zero(), &mut out, m as isize, 1);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out)?, rg)
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x)?, self.value(b)?);
        if xv.shape().len() < 2 || bv.len() != xv.shape()[1] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let lay = ChannelLayout::from_shape(xv.shape());
        let mut out = xv.data().to_vec();
        let bd = bv.data();
        lay.for_each(|c, i| out[i] += bd[c]);
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, b]);
        self.push(Op::AddBias(x, b), Tensor::new(shape, out)?, rg)
    }

    /// Stride-1 2-D convolution, `x`: (N, Ci, H, W), `w`: (Co, Ci, kh, kw).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        let (xv, wv) = (self.value(x)?, self.value(w)?);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("{sx:?} * {sw:?}")));
        }
        let geom = ConvGeom { n: sx[0], ci: sx[1], h: sx[2], w: sx[3], co: sw[0], kh: sw[2], kw: sw[3], pad };
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        let out = kernels::conv2d_forward(&geom, xv.data(), wv.data());
        let shape = vec![geom.n, geom.co, geom.out_h(), geom.out_w()];
        let rg = self.rg(&[x, w]);
        self.push(Op::Conv2d { x, w, geom }, Tensor::new(shape, out)?, rg)
    }

    /// Non-overlapping average pooling with a (kh, kw) window.
    pub fn avg_pool2d(&mut self, x: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let xv = self.value(x)?;
        let s = xv.shape();
        if s.len() != 4 || kh == 0 || kw == 0 || s[2] % kh != 0 || s[3] % kw != 0 {
            return Err(shape_err("avg_pool2d", format!("{s:?} with window {kh}x{kw}")));
        }
        let out = kernels::avg_pool_forward(xv.data(), s[0] * s[1], s[2], s[3], kh, kw);
        let shape = vec![s[0], s[1], s[2] / kh, s[3] / kw];
        let rg = self.rg(&[x]);
        self.push(Op::AvgPool2d { x, kh, kw }, Tensor::new(shape, out)?, rg)
    }

    fn unary(&mut self, x: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> Result<NodeId> {
        let out = self.value(x)?.map(f);
        let rg = self.rg(&[x]);
        self.push(op, out, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Clamp to `[lo, hi]` with a straight-through gradient inside the interval.
    pub fn clip(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if lo > hi {
            return Err(invalid("clip with lo > hi"));
        }
        self.unary(x, Op::Clip { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Elementwise sign with sign(0) = 0. Forward only.
    pub fn sign(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sign, sign)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(shape_err(op.name(), format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(op, Tensor::new(shape, out)?, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    fn class_rows(&self, x: NodeId, op: &'static str) -> Result<usize> {
        let s = self.shape(x)?;
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected (N, C), got {s:?}")));
        }
        Ok(s[1])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let c = self.class_rows(x, "softmax")?;
        let xv = self.value(x)?;
        let out = Tensor::new(xv.shape().to_vec(), kernels::softmax_rows(xv.data(), c))?;
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), out, rg)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let c = self.class_rows(x, "log_softmax")?;
        let xv = self.value(x)?;
        let out = Tensor::new(xv.shape().to_vec(), kernels::log_softmax_rows(xv.data(), c))?;
        let rg = self.rg(&[x]);
        self.push(Op::LogSoftmax(x), out, rg)
    }

    /// Per-sample negative log-likelihood `-logp[i, labels[i]]`, shape (N,).
    pub fn nll(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let c = self.class_rows(logp, "nll")?;
        let lv = self.value(logp)?;
        if labels.len() != lv.rows() {
            return Err(shape_err("nll", format!("{} labels for {} rows", labels.len(), lv.rows())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(invalid(format!("label {bad} out of range for {c} classes")));
        }
        let out: Vec<T> = labels.iter().enumerate().map(|(i, &y)| -lv.data()[i * c + y]).collect();
        let rg = self.rg(&[logp]);
        self.push(Op::Nll { logp, labels: labels.to_vec() }, Tensor::new(vec![labels.len()], out)?, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x)?;
        let m = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), Tensor::scalar(m), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x)?.data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x)?.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(Op::Reshape(x), out, rg)
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?;
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// Fixed per-channel affine map `x * scale[c] + shift[c]` (no trainable inputs).
    pub fn channel_affine(&mut self, x: NodeId, scale: &[T], shift: &[T]) -> Result<NodeId> {
        let xv = self.value(x)?;
        if xv.shape().len() < 2 || xv.shape()[1] != scale.len() || scale.len() != shift.len() {
            return Err(shape_err("channel_affine", format!("{:?} with {} channels", xv.shape(), scale.len())));
        }
        let lay = ChannelLayout::from_shape(xv.shape());
        let mut out = xv.data().to_vec();
        lay.for_each(|c, i| out[i] = out[i] * scale[c] + shift[c]);
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::ChannelAffine { x, scale: scale.to_vec() }, Tensor::new(shape, out)?, rg)
    }

    fn bn_check(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<ChannelLayout> {
        let s = self.shape(x)?;
        if s.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {s:?} has no channel axis")));
        }
        let lay = ChannelLayout::from_shape(s);
        if self.value(gamma)?.len() != lay.c || self.value(beta)?.len() != lay.c {
            return Err(shape_err("batch_norm", format!("{} channels, affine of length {}", lay.c, self.value(gamma)?.len())));
        }
        Ok(lay)
    }

    /// Batch normalization with batch statistics (biased variance).
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchMoments<T>)> {
        let lay = self.bn_check(x, gamma, beta)?;
        let xv = self.value(x)?;
        let (mean, var) = kernels::channel_moments(xv.data(), lay);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::bn_apply(xv.data(), lay, &mean, &inv_std, self.value(gamma)?.data(), self.value(beta)?.data());
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true },
            Tensor::new(shape, y)?,
            rg,
        )?;
        Ok((id, BatchMoments { mean, var, count: lay.count() }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let lay = self.bn_check(x, gamma, beta)?;
        if mean.len() != lay.c || var.len() != lay.c {
            return Err(shape_err("batch_norm", "running statistics length"));
        }
        let xv = self.value(x)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::bn_apply(xv.data(), lay, mean, &inv_std, self.value(gamma)?.data(), self.value(beta)?.data());
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false },
            Tensor::new(shape, y)?,
            rg,
        )
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_scaled(loss, T::one())
    }

    /// Back-propagates `seed * d(loss)` into every leaf that requires gradients.
    pub fn backward_scaled(&mut self, loss: NodeId, seed: T) -> Result<()> {
        let lv = self.value(loss)?;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        // Intermediate gradients from an earlier pass were already consumed.
        for (n, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        self.grads[loss.0] = Some(vec![seed]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = self.grads[id].take() else {
                continue;
            };
            for (input, g) in self.input_grads(id, &dy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> Result<&[T]> {
        Ok(self.value(id)?.data())
    }

    /// Vector-Jacobian products of node `id` for its differentiable inputs.
    fn input_grads(&self, id: usize, dy: &[T]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let node = &self.nodes[id];
        let y = node.value.as_ref().ok_or(Error::BackwardBeforeForward(id))?;
        let want = |n: NodeId| self.requires_grad(n);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a)?, self.value(*b)?);
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut r = vec![];
                if want(*a) {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), dy, m as isize, 1, bv.data(), 1, m as isize, T::zero(), &mut da, k as isize, 1);
                    r.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(k, n, m, T::one(), av.data(), 1, k as isize, dy, m as isize, 1, T::zero(), &mut db, m as isize, 1);
                    r.push((*b, db));
                }
                r
            }
            Op::AddBias(x, b) => {
                let lay = ChannelLayout::from_shape(y.shape());
                let mut db = vec![T::zero(); lay.c];
                lay.for_each(|c, i| db[c] += dy[i]);
                vec![(*x, dy.to_vec()), (*b, db)]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(geom, self.val(*x)?, self.val(*w)?, dy, want(*x), want(*w));
                let mut r = vec![];
                if let Some(dx) = dx {
                    r.push((*x, dx));
                }
                if let Some(dw) = dw {
                    r.push((*w, dw));
                }
                r
            }
            Op::AvgPool2d { x, kh, kw } => {
                let s = self.shape(*x)?;
                vec![(*x, kernels::avg_pool_backward(dy, s[0] * s[1], s[2], s[3], *kh, *kw))]
            }
            Op::Relu(x) => {
                let xv = self.val(*x)?;
                vec![(*x, xv.iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect())]
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Sub(a, b) => vec![(*a, dy.to_vec()), (*b, dy.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a)?, self.val(*b)?);
                vec![
                    (*a, dy.iter().zip(bv).map(|(&g, &q)| g * q).collect()),
                    (*b, dy.iter().zip(av).map(|(&g, &p)| g * p).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, dy.iter().map(|&g| g * *c).collect())],
            Op::Clip { x, lo, hi } => {
                let xv = self.val(*x)?;
                vec![(*x, xv.iter().zip(dy).map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { T::zero() }).collect())]
            }
            Op::Sign => return Err(Error::NotDifferentiable("sign")),
            Op::Softmax(x) => {
                let c = y.shape()[1];
                let mut dx = vec![T::zero(); dy.len()];
                for ((yr, gr), dr) in y.data().chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for ((d, &p), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (g - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let c = y.shape()[1];
                let mut dx = vec![T::zero(); dy.len()];
                for ((yr, gr), dr) in y.data().chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &l), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = g - l.exp() * total;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Nll { logp, labels } => {
                let c = self.shape(*logp)?[1];
                let mut dl = vec![T::zero(); labels.len() * c];
                for (i, &lab) in labels.iter().enumerate() {
                    dl[i * c + lab] = -dy[i];
                }
                vec![(*logp, dl)]
            }
            Op::Mean(x) => {
                let n = self.value(*x)?.len();
                vec![(*x, vec![dy[0] / T::of(n as f64); n])]
            }
            Op::Sum(x) => vec![(*x, vec![dy[0]; self.value(*x)?.len()])],
            Op::Reshape(x) => vec![(*x, dy.to_vec())],
            Op::ChannelAffine { x, scale } => {
                let lay = ChannelLayout::from_shape(y.shape());
                let mut dx = dy.to_vec();
                lay.for_each(|c, i| dx[i] *= scale[c]);
                vec![(*x, dx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                if xhat.is_empty() {
                    return Err(Error::BackwardBeforeForward(id));
                }
                let lay = ChannelLayout::from_shape(y.shape());
                let (dx, dg, db) = kernels::bn_backward(dy, xhat, lay, inv_std, self.val(*gamma)?, *batch_stats);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
        };
        Ok(out)
    }
}

/// sign with sign(0) = 0.
#[inline]
pub fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_and_log_softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let p = g.softmax(x).unwrap();
        assert_eq!(g.value(p).unwrap().data(), &[0.5, 0.5]);
        let z = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let l = g.log_softmax(z).unwrap();
        for &v in g.value(l).unwrap().data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn released_graph_cannot_backward() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.release();
        assert!(matches!(g.backward(s), Err(Error::BackwardBeforeForward(_))));
    }

    #[test]
    fn sign_is_forward_only() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-2.0, 0.0, 3.0]), true).unwrap();
        let s = g.sign(x).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[-1.0, 0.0, 1.0]);
        let l = g.sum(s).unwrap();
        assert!(matches!(g.backward(l), Err(Error::NotDifferentiable("sign"))));
    }

    #[test]
    fn clip_straight_through() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[-2.0, -0.5, 0.5, 2.0]), true).unwrap();
        let c = g.clip(x, -1.0, 1.0).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[-1.0, -0.5, 0.5, 1.0]);
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(t(&[1], &[f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let mut u = Graph::unchecked();
        assert!(u.constant(t(&[1], &[f64::INFINITY])).is_ok());
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert!(g.nll(x, &[2]).is_err());
    }

    #[test]
    fn backward_accumulates_linearly() {
        // backward(a) + backward(b) == backward(a + b) for a shared leaf.
        let build = |g: &mut Graph<f64>| {
            let w = g.leaf(t(&[2, 2], &[0.3, -0.7, 1.1, 0.4]), true).unwrap();
            let x = g.constant(t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.2, -0.3])).unwrap();
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h).unwrap();
            let a = g.sum(r).unwrap();
            let sq = g.mul(h, h).unwrap();
            let b = g.mean(sq).unwrap();
            (w, a, b)
        };
        let mut g1 = Graph::new();
        let (w1, a1, b1) = build(&mut g1);
        g1.backward(a1).unwrap();
        g1.backward(b1).unwrap();
        let mut g2 = Graph::new();
        let (w2, a2, b2) = build(&mut g2);
        let s = g2.add(a2, b2).unwrap();
        g2.backward(s).unwrap();
        let d = g1.grad(w1).unwrap().max_abs_diff(&g2.grad(w2).unwrap());
        assert!(d < 1e-14, "{d}");
    }
}
