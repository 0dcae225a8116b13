//! Per-sample uncertainty scores and top-k selection.
//!
//! Every metric follows the convention "larger score = more uncertain", so
//! selection always takes the largest scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::Targets;
use crate::error::{invalid, shape_err, Result};
use crate::kernels::softmax_rows;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMetric {
    /// Shannon entropy of the predictive distribution (natural log).
    Entropy,
    /// `-ln p(true)`.
    CrossEntropy,
    /// `-max_y p(y)`.
    Confidence,
    /// `max_{y != true} p(y) - p(true)`.
    LogitMargin,
}

impl UncertaintyMetric {
    pub fn needs_labels(self) -> bool {
        matches!(self, UncertaintyMetric::CrossEntropy | UncertaintyMetric::LogitMargin)
    }
}

/// Which labels label-dependent metrics use on mixed batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionLabels {
    /// The primary samples' original labels `y_a`.
    #[default]
    Primary,
    /// `lambda * score(y_a) + (1 - lambda) * score(y_b)`.
    Weighted,
}

fn rows_of<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [n, c] if *c >= 1 => Ok((*n, *c)),
        s => Err(shape_err(op, format!("expected (N, C), got {s:?}"))),
    }
}

fn row_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Row-wise entropy of probability rows (N, C), with `0 ln 0 = 0`.
pub fn entropy<T: Real>(probs: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, c) = rows_of(probs, "entropy")?;
    let p = probs.to_f64_vec();
    p.chunks(c)
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-5 {
                return Err(invalid(format!("row {i} is not a probability distribution (sum {s})")));
            }
            Ok(row_entropy(row))
        })
        .collect()
}

/// Softmax probabilities of logits in double precision.
pub fn probabilities<T: Real>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, c) = rows_of(logits, "softmax")?;
    Ok(softmax_rows(&logits.to_f64_vec(), c))
}

/// Entropy of `softmax(logits)` per row.
pub fn entropy_of_logits<T: Real>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, c) = rows_of(logits, "entropy")?;
    Ok(probabilities(logits)?.chunks(c).map(row_entropy).collect())
}

fn label_score(metric: UncertaintyMetric, p: &[f64], y: usize) -> f64 {
    match metric {
        UncertaintyMetric::CrossEntropy => -p[y].ln(),
        UncertaintyMetric::LogitMargin => {
            let other = p
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            other - p[y]
        }
        _ => unreachable!("label-free metric"),
    }
}

/// Scores computed from `softmax(logits)`; `labels` are required for
/// cross-entropy and logit margin.
pub fn uncertainty_score<T: Real>(
    logits: &Tensor<T>,
    labels: Option<&[usize]>,
    metric: UncertaintyMetric,
) -> Result<Vec<f64>> {
    let (n, c) = rows_of(logits, "uncertainty_score")?;
    let p = probabilities(logits)?;
    match metric {
        UncertaintyMetric::Entropy => Ok(p.chunks(c).map(row_entropy).collect()),
        UncertaintyMetric::Confidence => Ok(p
            .chunks(c)
            .map(|r| -r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()),
        _ => {
            let y = labels.ok_or_else(|| invalid(format!("{metric:?} needs the true labels")))?;
            if y.len() != n {
                return Err(shape_err("uncertainty_score", format!("{} labels for {n} rows", y.len())));
            }
            if let Some(&bad) = y.iter().find(|&&t| t >= c) {
                return Err(invalid(format!("label {bad} out of range for {c} classes")));
            }
            Ok(p.chunks(c).zip(y).map(|(r, &t)| label_score(metric, r, t)).collect())
        }
    }
}

/// Scores for a (possibly mixed) batch.
pub fn score_targets<T: Real>(
    logits: &Tensor<T>,
    targets: &Targets,
    metric: UncertaintyMetric,
    mode: SelectionLabels,
) -> Result<Vec<f64>> {
    match (targets, mode) {
        (Targets::Mixed { y_a, y_b, lambda }, SelectionLabels::Weighted) if metric.needs_labels() => {
            let a = uncertainty_score(logits, Some(y_a), metric)?;
            let b = uncertainty_score(logits, Some(y_b), metric)?;
            Ok(a.iter().zip(&b).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
        }
        _ => uncertainty_score(logits, Some(targets.primary()), metric),
    }
}

/// `round(k * n)` with halves rounded up, clamped to `[0, n]`.
pub fn selection_count(k: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&k) {
        return Err(invalid(format!("k must lie in [0, 1], got {k}")));
    }
    // The small offset absorbs representation error in k (e.g. 0.3 * 5).
    Ok(((k * n as f64 + 0.5 + 1e-9).floor() as usize).min(n))
}

/// Indices of the `round(k * N)` largest scores, in descending score order;
/// equal scores are ordered by lower index first.
pub fn top_k_select(scores: &[f64], k: f64) -> Result<Vec<usize>> {
    let m = selection_count(k, scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN uncertainty score"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    Ok(idx)
}

/// How often each dataset sample has been selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionCounter {
    counts: Vec<u64>,
}

impl SelectionCounter {
    pub fn new(samples: usize) -> Self {
        Self {
            counts: vec![0; samples],
        }
    }

    pub fn record(&mut self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.counts.len()) {
            return Err(invalid(format!("sample id {bad} outside {} tracked samples", self.counts.len())));
        }
        ids.iter().for_each(|&i| self.counts[i] += 1);
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `(selection_count, number_of_samples)` pairs, ascending by count.
    pub fn histogram(&self) -> Vec<(u64, usize)> {
        let mut h = std::collections::BTreeMap::new();
        for &c in &self.counts {
            *h.entry(c).or_insert(0) += 1;
        }
        h.into_iter().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_index,selection_count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(s, "{i},{c}").unwrap();
        }
        s
    }
}
