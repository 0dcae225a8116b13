//! Label-mixing augmentations (MixUp, CutMix) and the mixed cross-entropy.
//!
//! One mixing coefficient is drawn per batch. Mixed targets are represented
//! by [`Targets::Mixed`], which both the training losses and the attacks use.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::log_softmax_rows;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    Mixup,
    Cutmix,
}

/// Labels a loss is computed against.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Plain(Vec<usize>),
    /// `lambda * CE(y_a) + (1 - lambda) * CE(y_b)`.
    Mixed {
        y_a: Vec<usize>,
        y_b: Vec<usize>,
        lambda: f64,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Plain(y) => y.len(),
            Targets::Mixed { y_a, .. } => y_a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The primary labels (`y_a` for mixed targets).
    pub fn primary(&self) -> &[usize] {
        match self {
            Targets::Plain(y) => y,
            Targets::Mixed { y_a, .. } => y_a,
        }
    }

    /// Restricts the targets to the given rows.
    pub fn select(&self, idx: &[usize]) -> Targets {
        let pick = |y: &[usize]| idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
        match self {
            Targets::Plain(y) => Targets::Plain(pick(y)),
            Targets::Mixed { y_a, y_b, lambda } => Targets::Mixed {
                y_a: pick(y_a),
                y_b: pick(y_b),
                lambda: *lambda,
            },
        }
    }

    /// Mean loss over the batch as a scalar graph node.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, logits: NodeId) -> Result<NodeId> {
        match self {
            Targets::Plain(y) => cross_entropy(g, logits, y),
            Targets::Mixed { y_a, y_b, lambda } => mixed_loss(g, logits, y_a, y_b, *lambda),
        }
    }

    /// Per-sample losses computed in double precision.
    pub fn per_sample(&self, logits: &Tensor<impl Real>) -> Result<Vec<f64>> {
        let c = class_count(logits)?;
        let logp = log_softmax_rows(&logits.to_f64_vec(), c);
        let nll = |y: &[usize]| -> Result<Vec<f64>> {
            check_labels(y, logits.rows(), c)?;
            Ok(y.iter().enumerate().map(|(i, &t)| -logp[i * c + t]).collect())
        };
        match self {
            Targets::Plain(y) => nll(y),
            Targets::Mixed { y_a, y_b, lambda } => {
                let (a, b) = (nll(y_a)?, nll(y_b)?);
                Ok(a.iter().zip(&b).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
            }
        }
    }
}

fn class_count<T: Real>(logits: &Tensor<T>) -> Result<usize> {
    match logits.shape() {
        [_, c] => Ok(*c),
        s => Err(shape_err("loss", format!("logits must be (N, C), got {s:?}"))),
    }
}

fn check_labels(y: &[usize], rows: usize, c: usize) -> Result<()> {
    if y.len() != rows {
        return Err(shape_err("loss", format!("{} labels for {rows} rows", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&t| t >= c) {
        return Err(invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of `logits` (N, C) against `labels`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let logp = g.log_softmax(logits)?;
    let nll = g.nll(logp, labels)?;
    g.mean(nll)
}

/// `lambda * CE(logits, y_a) + (1 - lambda) * CE(logits, y_b)`.
pub fn mixed_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    y_a: &[usize],
    y_b: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("mixing coefficient {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return cross_entropy(g, logits, y_a);
    }
    if lambda == 0.0 {
        return cross_entropy(g, logits, y_b);
    }
    let la = cross_entropy(g, logits, y_a)?;
    let lb = cross_entropy(g, logits, y_b)?;
    let la = g.scale(la, T::of(lambda))?;
    let lb = g.scale(lb, T::of(1.0 - lambda))?;
    g.add(la, lb)
}

/// A batch after label mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch<T> {
    pub x_m: Tensor<T>,
    pub y_a: Vec<usize>,
    pub y_b: Vec<usize>,
    pub lambda: f64,
    pub perm: Vec<usize>,
    /// Dataset ids of the primary samples.
    pub source_indices: Vec<usize>,
}

impl<T> MixedBatch<T> {
    pub fn targets(&self) -> Targets {
        Targets::Mixed {
            y_a: self.y_a.clone(),
            y_b: self.y_b.clone(),
            lambda: self.lambda,
        }
    }
}

/// Draws the per-batch mixing coefficient from Beta(alpha, alpha).
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid(e.to_string()))?;
    Ok(beta.sample(rng))
}

fn random_perm(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(invalid("permutation length differs from batch size"));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(invalid("partner indices are not a permutation"));
        }
    }
    Ok(())
}

fn check_batch<T: Real>(batch: &Batch<T>) -> Result<()> {
    if batch.len() < 2 {
        return Err(invalid("label mixing needs a batch of at least 2 samples"));
    }
    Ok(())
}

/// MixUp with a freshly drawn `lambda` and partner permutation.
pub fn mixup<T: Real>(batch: &Batch<T>, alpha: f64, rng: &mut impl Rng) -> Result<MixedBatch<T>> {
    check_batch(batch)?;
    let lambda = sample_lambda(alpha, rng)?;
    let perm = random_perm(batch.len(), rng);
    mixup_with(batch, lambda, &perm)
}

/// MixUp with a given coefficient and permutation:
/// `x_m[i] = lambda * x[i] + (1 - lambda) * x[perm[i]]`.
pub fn mixup_with<T: Real>(batch: &Batch<T>, lambda: f64, perm: &[usize]) -> Result<MixedBatch<T>> {
    check_batch(batch)?;
    check_perm(perm, batch.len())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("mixing coefficient {lambda} outside [0, 1]")));
    }
    let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
    let x = &batch.x;
    let d = x.row_len();
    let mut out = Vec::with_capacity(x.len());
    for (i, &p) in perm.iter().enumerate() {
        // Clamping to the pair's range keeps round-off from leaving the
        // convex hull (and hence the valid input range).
        out.extend(x.row(i).iter().zip(x.row(p)).map(|(&a, &b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            (l * a + r * b).max(lo).min(hi)
        }));
    }
    debug_assert_eq!(out.len(), x.rows() * d);
    Ok(MixedBatch {
        x_m: Tensor::new(x.shape().to_vec(), out)?,
        y_a: batch.labels.clone(),
        y_b: perm.iter().map(|&p| batch.labels[p]).collect(),
        lambda,
        perm: perm.to_vec(),
        source_indices: batch.ids.clone(),
    })
}

/// Pasted rectangle in pixel coordinates; rows `top..top+height`,
/// columns `left..left+width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Box with side ratio `sqrt(1 - lambda)` around a uniformly drawn center,
/// clipped to the image.
pub fn sample_box(h: usize, w: usize, lambda: f64, rng: &mut impl Rng) -> CutBox {
    let cut = (1.0 - lambda).max(0.0).sqrt();
    let cut_h = (h as f64 * cut) as usize;
    let cut_w = (w as f64 * cut) as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let y1 = cy.saturating_sub(cut_h / 2);
    let y2 = (cy + cut_h / 2).min(h);
    let x1 = cx.saturating_sub(cut_w / 2);
    let x2 = (cx + cut_w / 2).min(w);
    CutBox {
        top: y1,
        left: x1,
        height: y2 - y1,
        width: x2 - x1,
    }
}

fn spatial<T: Real>(batch: &Batch<T>) -> Result<(usize, usize, usize)> {
    match batch.x.shape() {
        [_, c, h, w] if *h > 1 || *w > 1 => Ok((*c, *h, *w)),
        s => Err(shape_err("cutmix", format!("needs spatial (N, C, H, W) input, got {s:?}"))),
    }
}

/// CutMix with a freshly drawn box; `lambda` is recomputed from the box area.
pub fn cutmix<T: Real>(batch: &Batch<T>, alpha: f64, rng: &mut impl Rng) -> Result<MixedBatch<T>> {
    check_batch(batch)?;
    let (_, h, w) = spatial(batch)?;
    let lambda = sample_lambda(alpha, rng)?;
    let perm = random_perm(batch.len(), rng);
    let bx = sample_box(h, w, lambda, rng);
    cutmix_with(batch, bx, &perm)
}

/// Pastes `bx` from each partner image; `lambda = 1 - area / (H * W)`.
pub fn cutmix_with<T: Real>(batch: &Batch<T>, bx: CutBox, perm: &[usize]) -> Result<MixedBatch<T>> {
    check_batch(batch)?;
    check_perm(perm, batch.len())?;
    let (c, h, w) = spatial(batch)?;
    if bx.top + bx.height > h || bx.left + bx.width > w {
        return Err(invalid(format!("cut box {bx:?} exceeds {h}x{w} image")));
    }
    let x = &batch.x;
    let mut out = x.data().to_vec();
    let d = c * h * w;
    for (i, &p) in perm.iter().enumerate() {
        for ch in 0..c {
            for r in bx.top..bx.top + bx.height {
                let start = ch * h * w + r * w + bx.left;
                let range = start..start + bx.width;
                out[i * d..(i + 1) * d][range.clone()].copy_from_slice(&x.row(p)[range]);
            }
        }
    }
    Ok(MixedBatch {
        x_m: Tensor::new(x.shape().to_vec(), out)?,
        y_a: batch.labels.clone(),
        y_b: perm.iter().map(|&p| batch.labels[p]).collect(),
        lambda: 1.0 - bx.area() as f64 / (h * w) as f64,
        perm: perm.to_vec(),
        source_indices: batch.ids.clone(),
    })
}

/// Dispatches to [`mixup`] or [`cutmix`].
pub fn augment<T: Real>(
    kind: Augmentation,
    batch: &Batch<T>,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MixedBatch<T>> {
    match kind {
        Augmentation::Mixup => mixup(batch, alpha, rng),
        Augmentation::Cutmix => cutmix(batch, alpha, rng),
    }
}
