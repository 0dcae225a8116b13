//! Accuracy on clean, corrupted and adversarial test sets, the harmonic
//! H-score, feature-space Fréchet distances, and CSV diagnostics.
//!
//! All evaluation runs the main route with running statistics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{epsilon_schedule, input_gradient, pgd, AttackConfig, AttackRoute};
use crate::augment::{mixup, Targets};
use crate::checkpoint::write_atomic;
use crate::corrupt::{corrupt_dataset, CorruptionSpec};
use crate::data::{sequential_batches, Dataset};
use crate::error::{invalid, Result};
use crate::frechet::{fit_gaussian, frechet_distance};
use crate::model::Model;
use crate::norm::{Mode, Route};
use crate::real::Real;
use crate::rng::{substream, Stream};
use crate::selection::{top_k_select, uncertainty_score, SelectionCounter, UncertaintyMetric};
use crate::tensor::Tensor;
use crate::train::RunRecord;

pub const EVAL_BATCH: usize = 256;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[impl Real]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_labels<T: Real>(model: &mut Model<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let logits = model.predict(x, Route::Main, Mode::Eval)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Fraction of argmax-correct predictions.
pub fn standard_accuracy<T: Real>(model: &mut Model<T>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(invalid("empty test set"));
    }
    let mut correct = 0usize;
    for b in sequential_batches::<T>(ds, EVAL_BATCH)? {
        let p = predict_labels(model, &b.x)?;
        correct += p.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy on each corrupted copy of `ds`.
pub fn corruption_accuracies<T: Real>(
    model: &mut Model<T>,
    ds: &Dataset,
    suite: &[CorruptionSpec],
    seed: u64,
) -> Result<Vec<(CorruptionSpec, f64)>> {
    suite
        .iter()
        .map(|&spec| Ok((spec, standard_accuracy(model, &corrupt_dataset(ds, spec, seed)?)?)))
        .collect()
}

/// Mean accuracy over the corruption suite, every entry weighted equally.
pub fn robust_accuracy<T: Real>(model: &mut Model<T>, ds: &Dataset, suite: &[CorruptionSpec], seed: u64) -> Result<f64> {
    if suite.is_empty() {
        return Err(invalid("empty corruption suite"));
    }
    let accs = corruption_accuracies(model, ds, suite, seed)?;
    Ok(accs.iter().map(|(_, a)| a).sum::<f64>() / accs.len() as f64)
}

/// Harmonic mean `2 sa ra / (sa + ra)`, zero when both are zero.
pub fn h_score(sa: f64, ra: f64) -> Result<f64> {
    if sa < 0.0 || ra < 0.0 || sa.is_nan() || ra.is_nan() {
        return Err(invalid(format!("h_score of negative accuracy ({sa}, {ra})")));
    }
    if sa + ra == 0.0 {
        return Ok(0.0);
    }
    // Ordered so that sa == ra returns sa exactly.
    Ok(sa * (2.0 * ra / (sa + ra)))
}

/// Budget of the adversarial-robustness evaluation (1/255 units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdEval {
    pub steps: usize,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Default for PgdEval {
    fn default() -> Self {
        Self {
            steps: 20,
            epsilon: 1.0,
            alpha: 0.25,
        }
    }
}

/// Accuracy on inputs attacked through the main route in eval mode.
pub fn pgd_robust_accuracy<T: Real>(model: &mut Model<T>, ds: &Dataset, cfg: PgdEval) -> Result<f64> {
    if ds.is_empty() {
        return Err(invalid("empty test set"));
    }
    let acfg = AttackConfig {
        n: cfg.steps,
        epsilon: cfg.epsilon,
        alpha: cfg.alpha.min(cfg.epsilon),
        free_first_step: false,
    };
    acfg.validate()?;
    let mut correct = 0usize;
    for b in sequential_batches::<T>(ds, EVAL_BATCH)? {
        let x = if cfg.epsilon == 0.0 {
            b.x.clone()
        } else {
            let t = Targets::Plain(b.labels.clone());
            pgd(model, &b.x, &t, &acfg, AttackRoute::main_eval(), None)?.x_adv
        };
        let p = predict_labels(model, &x)?;
        correct += p.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Input transformations whose feature shift is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureTransform {
    /// MixUp of every batch.
    Mixup { alpha: f64 },
    /// Non-free PGD on every sample from the clean input.
    Pgd { n: usize, epsilon: f64, alpha: f64 },
    /// MixUp, keep the top-`k` entropy samples, free PGD of `n` steps.
    Entprop { k: f64, n: usize, alpha: f64 },
}

/// Penultimate features of transformed test samples (main route, eval mode).
pub fn transformed_features<T: Real>(
    model: &mut Model<T>,
    ds: &Dataset,
    transform: FeatureTransform,
    seed: u64,
) -> Result<Tensor<T>> {
    let route = AttackRoute::main_eval();
    let mut rows: Vec<T> = Vec::new();
    let mut count = 0;
    for (bi, b) in sequential_batches::<T>(ds, EVAL_BATCH)?.into_iter().enumerate() {
        if b.len() < 2 {
            continue;
        }
        let mut rng = substream(seed, Stream::Eval, bi as u64);
        let x: Tensor<T> = match transform {
            FeatureTransform::Mixup { alpha } => mixup(&b, alpha, &mut rng)?.x_m,
            FeatureTransform::Pgd { n, epsilon, alpha } => {
                let cfg = AttackConfig { n, epsilon, alpha, free_first_step: false };
                pgd(model, &b.x, &Targets::Plain(b.labels.clone()), &cfg, route, None)?.x_adv
            }
            FeatureTransform::Entprop { k, n, alpha } => {
                let mixed = mixup(&b, alpha, &mut rng)?;
                let targets = mixed.targets();
                let grad = input_gradient(model, &mixed.x_m, &targets, route)?;
                let logits = model.predict(&mixed.x_m, Route::Main, Mode::Eval)?;
                let scores = uncertainty_score(&logits, None, UncertaintyMetric::Entropy)?;
                let sel = top_k_select(&scores, k)?;
                if sel.is_empty() {
                    continue;
                }
                let (epsilon, step) = epsilon_schedule(n)?;
                let cfg = AttackConfig { n, epsilon, alpha: step, free_first_step: true };
                let xs = mixed.x_m.select_rows(&sel)?;
                pgd(model, &xs, &targets.select(&sel), &cfg, route, Some(&grad.select_rows(&sel)?))?.x_adv
            }
        };
        let f = model.penultimate_features(&x, Route::Main, Mode::Eval)?;
        count += f.rows();
        rows.extend_from_slice(f.data());
    }
    let d = model.spec().feature_dim();
    Tensor::new(vec![count, d], rows)
}

/// Fréchet distance between features of `ds` and of its transformed copy.
pub fn frechet_clean_vs_transformed<T: Real>(
    model: &mut Model<T>,
    ds: &Dataset,
    transform: FeatureTransform,
    seed: u64,
) -> Result<f64> {
    let x: Tensor<T> = ds.images.cast();
    let clean = model.penultimate_features(&x, Route::Main, Mode::Eval)?;
    let moved = transformed_features(model, ds, transform, seed)?;
    frechet_distance(&fit_gaussian(&clean)?, &fit_gaussian(&moved)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn entropy_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("epoch,clean_mean,clean_sd,transformed_mean,transformed_sd\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            opt(r.clean_entropy_mean),
            opt(r.clean_entropy_sd),
            opt(r.transformed_entropy_mean),
            opt(r.transformed_entropy_sd)
        )
        .unwrap();
    }
    s
}

pub fn metrics_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("epoch,SA,RA,H_score\n");
    for r in records {
        writeln!(s, "{},{},{},{}", r.epoch, opt(r.sa), opt(r.ra), opt(r.h_score)).unwrap();
    }
    s
}

/// Writes `entropy_per_epoch.csv`, `selection_bias.csv` and `metrics.csv`.
pub fn export_diagnostics(records: &[RunRecord], selection: &SelectionCounter, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("entropy_per_epoch.csv"), entropy_csv(records).as_bytes())?;
    write_atomic(&dir.join("selection_bias.csv"), selection.to_csv().as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(records).as_bytes())?;
    Ok(())
}
