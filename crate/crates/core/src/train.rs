//! Training steps for entropy-routed training and its baselines, loss-scale
//! normalization, pass-cost accounting and the epoch loop.
//!
//! Every method performs one optimizer update per batch on
//! `(B * L_main + sum of per-sample aux losses) / (B + m)`, where `m` is the
//! number of samples sent through the auxiliary route.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attack::{epsilon_schedule, pgd, AttackConfig, AttackRoute};
use crate::augment::{augment, Augmentation, Targets};
use crate::data::{batch_indices, Batch, Dataset};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::model::{ForwardOpts, Model, PassCounters};
use crate::norm::Route;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::real::Real;
use crate::rng::{substream, Stream};
use crate::selection::{entropy_of_logits, score_targets, selection_count, top_k_select, SelectionCounter, SelectionLabels, UncertaintyMetric};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    #[serde(rename = "mixprop")]
    MixProp,
    #[serde(rename = "advprop")]
    AdvProp,
    #[serde(rename = "fast_advprop")]
    FastAdvProp,
    #[serde(rename = "entprop")]
    EntProp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::MixProp => "mixprop",
            Method::AdvProp => "advprop",
            Method::FastAdvProp => "fast_advprop",
            Method::EntProp => "entprop",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Labels the auxiliary loss (and the attack) uses on mixed samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLabelMode {
    #[default]
    Mixed,
    OriginalA,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub method: Method,
    /// Fraction of each batch routed to the auxiliary branch (entprop).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    /// Attack iterations (entprop, advprop).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Attacked fraction (fast_advprop).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_adv: Option<f64>,
    /// Mix the batch before the main branch (vanilla, entprop).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_mixup: Option<bool>,
    /// Attack selected samples starting from the main-branch gradient (entprop).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_free: Option<bool>,
    #[serde(default = "default_alpha")]
    pub mixup_alpha: f64,
    #[serde(default = "default_augmentation")]
    pub augmentation: Augmentation,
    #[serde(default = "default_metric")]
    pub uncertainty: UncertaintyMetric,
    #[serde(default)]
    pub selection_labels: SelectionLabels,
    #[serde(default)]
    pub adv_label_mode: AdvLabelMode,
    /// Let attack iterations update auxiliary running statistics.
    #[serde(default)]
    pub attack_bn_update: bool,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit attack budget replacing the method default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_augmentation() -> Augmentation {
    Augmentation::Mixup
}

fn default_metric() -> UncertaintyMetric {
    UncertaintyMetric::Entropy
}

/// A method configuration with every default resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub method: Method,
    pub k: f64,
    pub p_adv: f64,
    pub use_mixup: bool,
    pub use_free: bool,
    /// Auxiliary-branch attack, if any.
    pub attack: Option<AttackConfig>,
}

impl TrainerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            k: None,
            n: None,
            p_adv: None,
            use_mixup: None,
            use_free: None,
            mixup_alpha: default_alpha(),
            augmentation: default_augmentation(),
            uncertainty: default_metric(),
            selection_labels: SelectionLabels::default(),
            adv_label_mode: AdvLabelMode::default(),
            attack_bn_update: false,
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            attack: None,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn entprop(k: f64, n: usize) -> Self {
        Self {
            k: Some(k),
            n: Some(n),
            ..Self::new(Method::EntProp)
        }
    }

    fn reject(&self, key: &str, present: bool) -> Result<()> {
        if present {
            return Err(Error::Config(format!("train.{key} is not used by method {}", self.method)));
        }
        Ok(())
    }

    /// Validates method-specific fields and fills in method defaults.
    pub fn resolve(&self) -> Result<Plan> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return cfg_err("train.batch_size must be at least 1".into());
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return cfg_err(format!("train.mixup_alpha must be positive, got {}", self.mixup_alpha));
        }
        for (key, v) in [("k", self.k), ("p_adv", self.p_adv)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return cfg_err(format!("train.{key} must lie in [0, 1], got {v}"));
                }
            }
        }
        if self.n == Some(0) {
            return cfg_err("train.n must be at least 1".into());
        }
        if let Some(a) = &self.attack {
            a.validate().map_err(|e| Error::Config(format!("train.attack: {e}")))?;
        }
        self.optimizer.validate()?;
        let m = self.method;
        let plan = match m {
            Method::Vanilla | Method::MixProp => {
                self.reject("k", self.k.is_some())?;
                self.reject("n", self.n.is_some())?;
                self.reject("p_adv", self.p_adv.is_some())?;
                self.reject("use_free", self.use_free.is_some())?;
                self.reject("attack", self.attack.is_some())?;
                if m == Method::MixProp {
                    self.reject("use_mixup", self.use_mixup.is_some())?;
                }
                Plan {
                    method: m,
                    k: 0.0,
                    p_adv: 0.0,
                    use_mixup: self.use_mixup.unwrap_or(false),
                    use_free: false,
                    attack: None,
                }
            }
            Method::AdvProp => {
                self.reject("k", self.k.is_some())?;
                self.reject("p_adv", self.p_adv.is_some())?;
                self.reject("use_mixup", self.use_mixup.is_some())?;
                self.reject("use_free", self.use_free.is_some())?;
                let n = self.n.unwrap_or(5);
                let attack = self.attack.unwrap_or(AttackConfig {
                    n,
                    epsilon: 4.0,
                    alpha: 1.0,
                    free_first_step: false,
                });
                if attack.n != n {
                    return cfg_err(format!("train.n = {n} disagrees with train.attack.n = {}", attack.n));
                }
                Plan {
                    method: m,
                    k: 1.0,
                    p_adv: 0.0,
                    use_mixup: false,
                    use_free: attack.free_first_step,
                    attack: Some(attack),
                }
            }
            Method::FastAdvProp => {
                self.reject("k", self.k.is_some())?;
                self.reject("n", self.n.is_some())?;
                self.reject("use_mixup", self.use_mixup.is_some())?;
                self.reject("use_free", self.use_free.is_some())?;
                let attack = self.attack.unwrap_or(AttackConfig {
                    n: 1,
                    epsilon: 1.0,
                    alpha: 1.0,
                    free_first_step: true,
                });
                Plan {
                    method: m,
                    k: 0.0,
                    p_adv: self.p_adv.unwrap_or(0.2),
                    use_mixup: false,
                    use_free: attack.free_first_step,
                    attack: Some(attack),
                }
            }
            Method::EntProp => {
                self.reject("p_adv", self.p_adv.is_some())?;
                let use_free = self.use_free.unwrap_or(true);
                let n = self.n.unwrap_or(1);
                if !use_free && self.attack.is_some() {
                    return cfg_err("train.attack is set but train.use_free = false disables the attack".into());
                }
                let attack = if use_free {
                    let (epsilon, alpha) = epsilon_schedule(n)?;
                    let a = self.attack.unwrap_or(AttackConfig {
                        n,
                        epsilon,
                        alpha,
                        free_first_step: true,
                    });
                    if a.n != n {
                        return cfg_err(format!("train.n = {n} disagrees with train.attack.n = {}", a.n));
                    }
                    if !a.free_first_step {
                        return cfg_err("train.attack.free_first_step must be true for entprop".into());
                    }
                    Some(a)
                } else {
                    None
                };
                Plan {
                    method: m,
                    k: self.k.unwrap_or(0.2),
                    p_adv: 0.0,
                    use_mixup: self.use_mixup.unwrap_or(true),
                    use_free,
                    attack,
                }
            }
        };
        Ok(plan)
    }

    /// This config with every method default written out. Resolves to the
    /// same plan as `self`.
    pub fn effective(&self) -> Result<TrainerConfig> {
        let p = self.resolve()?;
        let mut c = self.clone();
        match p.method {
            Method::Vanilla => c.use_mixup = Some(p.use_mixup),
            Method::MixProp => {}
            Method::AdvProp => {
                c.n = p.attack.map(|a| a.n);
                c.attack = p.attack;
            }
            Method::FastAdvProp => {
                c.p_adv = Some(p.p_adv);
                c.attack = p.attack;
            }
            Method::EntProp => {
                c.k = Some(p.k);
                c.use_mixup = Some(p.use_mixup);
                c.use_free = Some(p.use_free);
                if let Some(a) = p.attack {
                    c.n = Some(a.n);
                    c.attack = Some(a);
                }
            }
        }
        Ok(c)
    }
}

/// Training cost in units of N (one forward plus backward over the data).
pub fn theoretical_cost(method: Method, k: f64, n: usize, p_adv: f64) -> f64 {
    match method {
        Method::Vanilla => 1.0,
        Method::AdvProp => 2.0 + n as f64,
        Method::FastAdvProp => 1.0 + p_adv,
        Method::MixProp => 2.0,
        Method::EntProp => 1.0 + k * n as f64,
    }
}

impl Plan {
    /// Cost of this plan in units of N. Without the free attack the selected
    /// samples cost one auxiliary pass each.
    pub fn theoretical_cost(&self) -> f64 {
        match self.method {
            Method::EntProp if !self.use_free => theoretical_cost(Method::EntProp, self.k, 1, 0.0),
            m => {
                let n = self.attack.map_or(1, |a| a.n);
                theoretical_cost(m, self.k, n, self.p_adv)
            }
        }
    }
}

/// `(B * main_mean + sum(aux)) / (B + aux.len())`.
pub fn normalize_total_loss(main_mean: f64, aux: &[f64], batch_size: usize) -> Result<f64> {
    if aux.len() > batch_size {
        return Err(invalid("more auxiliary samples than batch samples"));
    }
    let b = batch_size as f64;
    Ok((b * main_mean + aux.iter().sum::<f64>()) / (b + aux.len() as f64))
}

/// Streaming mean / standard deviation (population) of per-sample values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn from_slice(v: &[f64]) -> Self {
        let mut s = Self::default();
        v.iter().for_each(|&x| s.push(x));
        s
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &RunningStats) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        let n = (self.count + o.count) as f64;
        let d = o.mean - self.mean;
        self.mean += d * o.count as f64 / n;
        self.m2 += o.m2 + d * d * self.count as f64 * o.count as f64 / n;
        self.count += o.count;
    }

    pub fn sd(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }

    /// `None` when nothing was observed.
    pub fn summary(&self) -> Option<(f64, f64)> {
        (self.count > 0).then(|| (self.mean, self.sd()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub batch_size: usize,
    /// Mean main-branch loss.
    pub clean_loss: f64,
    /// Mean auxiliary-branch loss, if the branch ran.
    pub aux_loss: Option<f64>,
    pub total_loss: f64,
    /// Per-sample entropy of main-branch predictions.
    pub clean_entropy: RunningStats,
    /// Per-sample entropy of auxiliary-branch predictions.
    pub transformed_entropy: RunningStats,
    /// Dataset ids of the samples sent through the auxiliary branch.
    pub selected: Vec<usize>,
    /// Sample-level passes performed by this step.
    pub forward_count: u64,
    pub backward_count: u64,
    pub attack_calls: u64,
}

struct Branch<T> {
    loss: f64,
    logits: Tensor<T>,
    input_grad: Option<Tensor<T>>,
}

fn run_branch<T: Real>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    targets: &Targets,
    route: Route,
    want_input_grad: bool,
    scale: T,
) -> Result<Branch<T>> {
    let mut g = Graph::new();
    let pass = model.forward_input(&mut g, x, want_input_grad, ForwardOpts::train(route))?;
    let loss = targets.loss(&mut g, pass.logits)?;
    model.backward(&mut g, &pass, loss, scale)?;
    Ok(Branch {
        loss: g.value(loss)?.data()[0].as_f64(),
        logits: g.value(pass.logits)?.clone(),
        input_grad: if want_input_grad { g.grad(pass.input) } else { None },
    })
}

/// Step-local random streams.
fn step_rng(seed: u64, stream: Stream, step: u64) -> rand_chacha::ChaCha8Rng {
    substream(seed, stream, step)
}

/// Runs one training step (forward/backward of every branch) and applies
/// the optimizer update with learning rate `lr`. `step` indexes the step
/// within the run and keys its random streams.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Batch<T>,
    cfg: &TrainerConfig,
    plan: &Plan,
    step: u64,
    lr: f64,
) -> Result<StepReport> {
    let before = model.counters();
    model.zero_grad();
    let b = batch.len();
    let attack_route = AttackRoute {
        update_stats: cfg.attack_bn_update,
        ..AttackRoute::aux_train()
    };
    let mut mix_rng = step_rng(cfg.seed, Stream::Mixup, step);
    let mut report = StepReport {
        batch_size: b,
        clean_loss: 0.0,
        aux_loss: None,
        total_loss: 0.0,
        clean_entropy: RunningStats::default(),
        transformed_entropy: RunningStats::default(),
        selected: Vec::new(),
        forward_count: 0,
        backward_count: 0,
        attack_calls: 0,
    };

    // Main-branch input/targets, auxiliary row selection and aux inputs.
    let (x_main, t_main) = match plan.method {
        Method::Vanilla | Method::EntProp if plan.use_mixup => {
            let mixed = augment(cfg.augmentation, batch, cfg.mixup_alpha, &mut mix_rng)?;
            let t = mixed.targets();
            (mixed.x_m, t)
        }
        _ => (batch.x.clone(), Targets::Plain(batch.labels.clone())),
    };

    // Number of auxiliary samples, fixed before any backward so the branch
    // weights are known. Train-mode normalization needs two samples.
    let mut m = match plan.method {
        Method::Vanilla => 0,
        Method::MixProp | Method::AdvProp => b,
        Method::FastAdvProp => selection_count(plan.p_adv, b)?,
        Method::EntProp => selection_count(plan.k, b)?,
    };
    if m < 2 {
        m = 0;
    }
    let denom = (b + m) as f64;
    let main_scale = T::of(b as f64 / denom);
    let aux_scale = T::of(m as f64 / denom);
    let need_seed = m > 0 && plan.attack.is_some_and(|a| a.free_first_step);

    let main = run_branch(model, &x_main, &t_main, Route::Main, need_seed, main_scale)?;
    report.clean_loss = main.loss;
    report.clean_entropy = RunningStats::from_slice(&entropy_of_logits(&main.logits)?);

    let mut aux_losses = Vec::new();
    if m > 0 {
        let rows: Vec<usize> = match plan.method {
            Method::EntProp => {
                let scores = score_targets(&main.logits, &t_main, cfg.uncertainty, cfg.selection_labels)?;
                let mut sel = top_k_select(&scores, plan.k)?;
                sel.truncate(m);
                sel
            }
            Method::FastAdvProp => {
                let mut rng = step_rng(cfg.seed, Stream::Attack, step);
                let mut rows = sample(&mut rng, b, m).into_vec();
                rows.sort_unstable();
                rows
            }
            _ => (0..b).collect(),
        };
        let (x_sel, t_sel) = match plan.method {
            Method::MixProp => {
                let mixed = augment(cfg.augmentation, batch, cfg.mixup_alpha, &mut mix_rng)?;
                let t = mixed.targets();
                (mixed.x_m, t)
            }
            _ => {
                let t = match (&t_main, cfg.adv_label_mode) {
                    (Targets::Mixed { y_a, .. }, AdvLabelMode::OriginalA) => {
                        Targets::Plain(rows.iter().map(|&i| y_a[i]).collect())
                    }
                    _ => t_main.select(&rows),
                };
                (x_main.select_rows(&rows)?, t)
            }
        };
        let x_aux = match &plan.attack {
            Some(acfg) => {
                let seed = match &main.input_grad {
                    Some(gr) if acfg.free_first_step => Some(gr.select_rows(&rows)?),
                    _ => None,
                };
                report.attack_calls += 1;
                pgd(model, &x_sel, &t_sel, acfg, attack_route, seed.as_ref())?.x_adv
            }
            None => x_sel,
        };
        let aux = run_branch(model, &x_aux, &t_sel, Route::Aux, false, aux_scale)?;
        aux_losses = t_sel.per_sample(&aux.logits)?;
        report.aux_loss = Some(aux.loss);
        report.transformed_entropy = RunningStats::from_slice(&entropy_of_logits(&aux.logits)?);
        report.selected = rows.iter().map(|&i| batch.ids[i]).collect();
    }
    report.total_loss = normalize_total_loss(main.loss, &aux_losses, b)?;
    if !report.total_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: step as usize,
            loss: report.total_loss,
        });
    }
    opt.step(model, lr);
    let PassCounters { forward, backward } = model.counters() - before;
    report.forward_count = forward;
    report.backward_count = backward;
    Ok(report)
}

/// Per-epoch aggregate, serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub clean_loss: f64,
    pub aux_loss: Option<f64>,
    pub total_loss: f64,
    pub clean_entropy_mean: Option<f64>,
    pub clean_entropy_sd: Option<f64>,
    pub transformed_entropy_mean: Option<f64>,
    pub transformed_entropy_sd: Option<f64>,
    pub selected: u64,
    pub forward_passes: u64,
    pub backward_passes: u64,
    /// `(forward + backward) / (2 N)`.
    pub measured_cost: f64,
    pub theoretical_cost: f64,
    pub sa: Option<f64>,
    pub ra: Option<f64>,
    pub h_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub selection: SelectionCounter,
    /// Selected dataset ids of every step, in order.
    pub step_selections: Vec<Vec<usize>>,
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Diverged { step, loss, .. } => Error::Diverged { epoch, step, loss },
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step: 0,
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Trains `model` for `cfg.epochs` epochs. `on_epoch` runs after each epoch
/// and may fill in evaluation fields of the record.
pub fn run_training<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    cfg: &TrainerConfig,
    mut on_epoch: impl FnMut(&mut RunRecord, &mut Model<T>) -> Result<()>,
) -> Result<RunOutput> {
    let plan = cfg.resolve()?;
    if model.spec().input_shape[..] != train.sample_shape()[..] || model.classes() < train.class_count {
        return Err(invalid("model and dataset shapes disagree"));
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut out = RunOutput {
        records: Vec::new(),
        selection: SelectionCounter::new(train.sample_ids.iter().max().map_or(0, |&m| m + 1)),
        step_selections: Vec::new(),
    };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let mut clean_loss = 0.0;
        let mut total_loss = 0.0;
        let mut aux_sum = 0.0;
        let mut aux_n = 0usize;
        let mut clean = RunningStats::default();
        let mut transformed = RunningStats::default();
        let mut selected = 0u64;
        let mut fwd = 0;
        let mut bwd = 0;
        for (i, idx) in batch_indices(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?.iter().enumerate() {
            let batch: Batch<T> = train.batch(idx)?;
            let r = train_step(model, &mut opt, &batch, cfg, &plan, step, lr).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { epoch, step: i, loss },
                e => with_epoch(e, epoch),
            })?;
            step += 1;
            let bs = r.batch_size as f64;
            clean_loss += r.clean_loss * bs;
            total_loss += r.total_loss * bs;
            if let Some(a) = r.aux_loss {
                aux_sum += a * r.selected.len() as f64;
                aux_n += r.selected.len();
            }
            clean.merge(&r.clean_entropy);
            transformed.merge(&r.transformed_entropy);
            selected += r.selected.len() as u64;
            fwd += r.forward_count;
            bwd += r.backward_count;
            out.selection.record(&r.selected)?;
            out.step_selections.push(r.selected);
        }
        let n = train.len() as f64;
        let mut rec = RunRecord {
            epoch: epoch + 1,
            lr,
            samples: train.len(),
            clean_loss: clean_loss / n,
            aux_loss: (aux_n > 0).then(|| aux_sum / aux_n as f64),
            total_loss: total_loss / n,
            clean_entropy_mean: clean.summary().map(|s| s.0),
            clean_entropy_sd: clean.summary().map(|s| s.1),
            transformed_entropy_mean: transformed.summary().map(|s| s.0),
            transformed_entropy_sd: transformed.summary().map(|s| s.1),
            selected,
            forward_passes: fwd,
            backward_passes: bwd,
            measured_cost: (fwd + bwd) as f64 / (2.0 * n),
            theoretical_cost: plan.theoretical_cost(),
            sa: None,
            ra: None,
            h_score: None,
        };
        on_epoch(&mut rec, model)?;
        out.records.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_formulas() {
        assert_eq!(theoretical_cost(Method::EntProp, 0.2, 5, 0.0), 2.0);
        assert!((theoretical_cost(Method::EntProp, 0.6, 1, 0.0) - 1.6).abs() < 1e-12);
        assert_eq!(theoretical_cost(Method::Vanilla, 0.0, 0, 0.0), 1.0);
        assert_eq!(theoretical_cost(Method::AdvProp, 0.0, 5, 0.0), 7.0);
        assert!((theoretical_cost(Method::FastAdvProp, 0.0, 1, 0.2) - 1.2).abs() < 1e-12);
        assert_eq!(theoretical_cost(Method::MixProp, 0.0, 0, 0.0), 2.0);
    }

    #[test]
    fn normalized_loss() {
        assert_eq!(normalize_total_loss(1.3, &[], 8).unwrap(), 1.3);
        assert!((normalize_total_loss(0.7, &[0.7; 4], 4).unwrap() - 0.7).abs() < 1e-15);
        assert!((normalize_total_loss(1.0, &[2.0, 4.0], 4).unwrap() - 10.0 / 6.0).abs() < 1e-15);
        assert!(normalize_total_loss(1.0, &[1.0; 3], 2).is_err());
    }

    #[test]
    fn method_fields_validated() {
        let mut c = TrainerConfig::new(Method::AdvProp);
        c.k = Some(0.3);
        let e = c.resolve().unwrap_err().to_string();
        assert!(e.contains("train.k"), "{e}");
        let p = TrainerConfig::new(Method::AdvProp).resolve().unwrap();
        assert_eq!(p.attack.unwrap(), AttackConfig { n: 5, epsilon: 4.0, alpha: 1.0, free_first_step: false });
        let p = TrainerConfig::entprop(0.2, 5).resolve().unwrap();
        assert_eq!(p.attack.unwrap().epsilon, 6.0);
        let mut c = TrainerConfig::entprop(0.2, 1);
        c.use_free = Some(false);
        let p = c.resolve().unwrap();
        assert!(p.attack.is_none());
        assert!((p.theoretical_cost() - 1.2).abs() < 1e-12);
        let mut c = TrainerConfig::entprop(1.2, 1);
        assert!(c.resolve().is_err());
        c.k = Some(0.5);
        c.p_adv = Some(0.1);
        assert!(c.resolve().is_err());
    }

    #[test]
    fn effective_config_resolves_to_the_same_plan() {
        let mut cfgs = vec![
            TrainerConfig::new(Method::Vanilla),
            TrainerConfig::new(Method::MixProp),
            TrainerConfig::new(Method::AdvProp),
            TrainerConfig::new(Method::FastAdvProp),
            TrainerConfig::entprop(0.3, 2),
        ];
        let mut c = TrainerConfig::entprop(0.5, 1);
        c.use_free = Some(false);
        cfgs.push(c);
        for c in cfgs {
            let e = c.effective().unwrap();
            assert_eq!(c.resolve().unwrap(), e.resolve().unwrap(), "{}", c.method);
            assert_eq!(e.effective().unwrap(), e);
        }
    }

    #[test]
    fn running_stats_merge_matches_direct() {
        let v: Vec<f64> = (0..17).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut a = RunningStats::from_slice(&v[..5]);
        a.merge(&RunningStats::from_slice(&v[5..]));
        let d = RunningStats::from_slice(&v);
        let mean = v.iter().sum::<f64>() / 17.0;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 17.0).sqrt();
        assert!((a.mean - mean).abs() < 1e-14 && (d.mean - mean).abs() < 1e-14);
        assert!((a.sd() - sd).abs() < 1e-14);
    }
}
