//! Experiment configuration and the train / eval / sweep / report drivers
//! used by the command-line tool.
//!
//! A config is TOML with the sections `[train]` (plus `[train.attack]`,
//! `[train.optimizer]`), `[model]`, `[data]`, `[eval]` and `[output]`, and a
//! top-level `precision`. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{model_from_container, model_to_container, write_atomic, Container};
use crate::corrupt::CorruptionSpec;
use crate::data::{load_cifar100_binary, synth_clusters, Dataset, SynthShape};
use crate::error::{Error, Result};
use crate::eval::{
    corruption_accuracies, export_diagnostics, frechet_clean_vs_transformed, h_score, pgd_robust_accuracy,
    standard_accuracy, FeatureTransform, PgdEval,
};
use crate::model::{Model, ModelKind, ModelSpec};
use crate::real::{Precision, Real};
use crate::train::{run_training, Method, RunRecord, TrainerConfig};

/// Prefix for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ENTPROP_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Required by `train` and `sweep`; `eval` ignores it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainerConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Defaults: `[8, 8, 16, 16]` for the CNN, `[32]` for the MLP.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    /// Defaults to `[1]` for the CNN.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_after: Option<Vec<usize>>,
    pub kernel: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_std: Option<Vec<f64>>,
    /// Initialization seed; defaults to `train.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SmallCnn,
            widths: None,
            pool_after: None,
            kernel: 3,
            input_mean: None,
            input_std: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    /// CIFAR-100 binary files at `train_path` / `test_path`.
    Cifar100,
    /// Dataset dumps written by [`Dataset::save`].
    Dump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Vector samples of this length instead of images (for the MLP).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vector_dim: Option<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    /// Synthetic layout seed; defaults to `train.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    /// Keep only the first samples of a loaded set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 3,
            channels: 1,
            height: 16,
            width: 16,
            vector_dim: None,
            train_per_class: 64,
            test_per_class: 50,
            spread: 0.8,
            seed: None,
            train_path: None,
            test_path: None,
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate SA/RA every this many epochs during training (0: final epoch only).
    pub eval_every: usize,
    pub split: EvalSplit,
    /// Corruption suite; absent means all 8 kinds at severities 1..=5, empty omits RA.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruptions: Option<Vec<CorruptionSpec>>,
    pub corruption_seed: u64,
    pub pgd_enabled: bool,
    pub pgd: PgdEval,
    pub frechet_enabled: bool,
    pub frechet_transform: FeatureTransform,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_every: 1,
            split: EvalSplit::Test,
            corruptions: None,
            corruption_seed: 0,
            pgd_enabled: true,
            pgd: PgdEval::default(),
            frechet_enabled: true,
            frechet_transform: FeatureTransform::Entprop { k: 0.2, n: 1, alpha: 1.0 },
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn suite(&self) -> Vec<CorruptionSpec> {
        self.corruptions.clone().unwrap_or_else(CorruptionSpec::full_suite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

fn cfg_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// The training section, which `train` and `sweep` require.
    pub fn trainer(&self) -> Result<&TrainerConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| cfg_err("missing required key train.method"))
    }

    fn seed(&self) -> u64 {
        self.train.as_ref().map_or(0, |t| t.seed)
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.train {
            t.resolve()?;
            if t.epochs == 0 {
                return Err(cfg_err("train.epochs must be at least 1"));
            }
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if !(d.spread > 0.0 && d.spread.is_finite()) {
                    return Err(cfg_err(format!("data.spread must be positive, got {}", d.spread)));
                }
                if d.classes < 2 || d.train_per_class == 0 || d.test_per_class == 0 {
                    return Err(cfg_err("data needs classes >= 2 and at least one sample per class"));
                }
                if d.vector_dim == Some(0) || d.channels == 0 || d.height == 0 || d.width == 0 {
                    return Err(cfg_err("data dimensions must be positive"));
                }
                if d.train_path.is_some() || d.test_path.is_some() {
                    return Err(cfg_err("data.train_path/test_path are not used by source synthetic"));
                }
                // A dry build catches model/data shape conflicts early.
                self.model_spec(self.synth_shape().input_shape(), d.classes)?.validate()?;
            }
            DataSource::Cifar100 | DataSource::Dump => {
                if d.train_path.is_none() || d.test_path.is_none() {
                    return Err(cfg_err("data.train_path and data.test_path are required for file sources"));
                }
            }
        }
        if let Some(s) = &self.eval.corruptions {
            for c in s {
                c.validate().map_err(|e| cfg_err(format!("eval.corruptions: {e}")))?;
            }
        }
        if let FeatureTransform::Entprop { k, n, .. } = self.eval.frechet_transform {
            if !(0.0..=1.0).contains(&k) || n == 0 {
                return Err(cfg_err("eval.frechet_transform needs k in [0, 1] and n >= 1"));
            }
        }
        Ok(())
    }

    fn synth_shape(&self) -> SynthShape {
        let d = &self.data;
        match d.vector_dim {
            Some(dim) => SynthShape::Vector { dim },
            None => SynthShape::Image {
                channels: d.channels,
                height: d.height,
                width: d.width,
            },
        }
    }

    /// Train and evaluation sets. The evaluation set honours `eval.split`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train, test) = match d.source {
            DataSource::Synthetic => {
                let seed = d.seed.unwrap_or(self.seed());
                let shape = self.synth_shape();
                (
                    synth_clusters(d.classes, shape, d.train_per_class, d.spread, seed, 0)?,
                    synth_clusters(d.classes, shape, d.test_per_class, d.spread, seed, 1)?,
                )
            }
            DataSource::Cifar100 | DataSource::Dump => {
                let load = |p: &Option<PathBuf>| -> Result<Dataset> {
                    let p = p.as_ref().ok_or_else(|| cfg_err("data path missing"))?;
                    match d.source {
                        DataSource::Cifar100 => load_cifar100_binary(p),
                        _ => Dataset::load(p),
                    }
                };
                (load(&d.train_path)?, load(&d.test_path)?)
            }
        };
        let train = match d.train_limit {
            Some(n) => train.head(n)?,
            None => train,
        };
        let test = match d.test_limit {
            Some(n) => test.head(n)?,
            None => test,
        };
        let eval = match self.eval.split {
            EvalSplit::Test => test,
            EvalSplit::Train => train.clone(),
        };
        Ok((train, eval))
    }

    pub fn model_spec(&self, input_shape: [usize; 3], classes: usize) -> Result<ModelSpec> {
        let m = &self.model;
        let seed = m.seed.unwrap_or(self.seed());
        let mut spec = match m.kind {
            ModelKind::SmallCnn => ModelSpec::small_cnn(input_shape, classes, seed),
            ModelKind::Mlp => {
                let dim = input_shape.iter().product();
                ModelSpec::mlp(dim, &[32], classes, seed)
            }
        };
        if m.kind == ModelKind::Mlp {
            spec.input_shape = input_shape.to_vec();
        }
        if let Some(w) = &m.widths {
            spec.widths = w.clone();
        }
        if let Some(p) = &m.pool_after {
            spec.pool_after = p.clone();
        }
        spec.kernel = m.kernel;
        spec.input_mean = m.input_mean.clone();
        spec.input_std = m.input_std.clone();
        spec.validate()?;
        Ok(spec)
    }

    /// Output directory, prefixed by `$ENTPROP_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir)
    }

    /// This config with defaults written out; reloading it reproduces the run.
    pub fn effective(&self, spec: &ModelSpec) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        if let Some(t) = &self.train {
            c.train = Some(t.effective()?);
        }
        c.model.widths = Some(spec.widths.clone());
        c.model.pool_after = Some(spec.pool_after.clone());
        c.model.seed = Some(spec.seed);
        if c.data.source == DataSource::Synthetic {
            c.data.seed = Some(self.data.seed.unwrap_or(self.seed()));
        }
        Ok(c)
    }
}

impl SynthShape {
    pub fn input_shape(&self) -> [usize; 3] {
        match *self {
            SynthShape::Vector { dim } => [dim, 1, 1],
            SynthShape::Image { channels, height, width } => [channels, height, width],
        }
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub kind: String,
    pub severity: u8,
    pub accuracy: f64,
}

/// Final metrics of a run or of a checkpoint evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theoretical_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_cost: Option<f64>,
    pub sa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ra: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgd20: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frechet_clean_vs_transformed: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corruptions: Vec<CorruptionResult>,
}

fn sa_ra<T: Real>(model: &mut Model<T>, ds: &Dataset, suite: &[CorruptionSpec], seed: u64) -> Result<(f64, Option<f64>)> {
    let sa = standard_accuracy(model, ds)?;
    if suite.is_empty() {
        return Ok((sa, None));
    }
    let per = corruption_accuracies(model, ds, suite, seed)?;
    Ok((sa, Some(per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64)))
}

/// SA, RA, H_score, PGD accuracy and feature shift of `model` on `ds`.
pub fn evaluate<T: Real>(model: &mut Model<T>, ds: &Dataset, cfg: &EvalConfig) -> Result<Summary> {
    let suite = cfg.suite();
    let sa = standard_accuracy(model, ds)?;
    let mut corruptions = Vec::new();
    let mut ra = None;
    if !suite.is_empty() {
        let per = corruption_accuracies(model, ds, &suite, cfg.corruption_seed)?;
        ra = Some(per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64);
        corruptions = per
            .into_iter()
            .map(|(s, a)| CorruptionResult {
                kind: serde_json::to_value(s.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                severity: s.severity,
                accuracy: a,
            })
            .collect();
    }
    let h = ra.map(|ra| h_score(sa, ra)).transpose()?;
    let pgd20 = if cfg.pgd_enabled {
        Some(pgd_robust_accuracy(model, ds, cfg.pgd)?)
    } else {
        None
    };
    let frechet = if cfg.frechet_enabled {
        Some(frechet_clean_vs_transformed(model, ds, cfg.frechet_transform, cfg.seed)?)
    } else {
        None
    };
    Ok(Summary {
        method: None,
        theoretical_cost: None,
        measured_cost: None,
        sa,
        ra,
        h_score: h,
        pgd20,
        frechet_clean_vs_transformed: frechet,
        corruptions,
    })
}

/// Artifacts of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Trains as configured and writes `config.effective.toml`, `records.jsonl`,
/// `checkpoint.bin`, the diagnostics CSVs and `summary.json` to the output
/// directory.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Real>(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let tc = cfg.trainer()?;
    let (train_set, eval_set) = cfg.datasets()?;
    let spec = cfg.model_spec(train_set.sample_shape(), train_set.class_count)?;
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    let effective = cfg.effective(&spec)?;
    write_atomic(&dir.join("config.effective.toml"), effective.to_toml()?.as_bytes())?;

    let mut model = Model::<T>::build(&spec)?;
    let suite = cfg.eval.suite();
    let every = cfg.eval.eval_every;
    let epochs = tc.epochs;
    let out = run_training(&mut model, &train_set, tc, |rec, m| {
        if (every > 0 && rec.epoch % every == 0) || rec.epoch == epochs {
            let (sa, ra) = sa_ra(m, &eval_set, &suite, cfg.eval.corruption_seed)?;
            rec.sa = Some(sa);
            rec.ra = ra;
            rec.h_score = ra.map(|ra| h_score(sa, ra)).transpose()?;
        }
        Ok(())
    })?;

    let mut lines = String::new();
    for r in &out.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_atomic(&dir.join("records.jsonl"), lines.as_bytes())?;
    export_diagnostics(&out.records, &out.selection, &dir)?;

    let mut ckpt = model_to_container(&model)?;
    ckpt.meta["train"] = serde_json::to_value(effective.train.as_ref())?;
    ckpt.save(&dir.join("checkpoint.bin"))?;

    let mut summary = evaluate(&mut model, &eval_set, &cfg.eval)?;
    let last = out.records.last();
    summary.method = Some(tc.method.name().to_string());
    summary.theoretical_cost = last.map(|r| r.theoretical_cost);
    summary.measured_cost = Some(mean_measured_cost(&out.records));
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(TrainOutcome {
        dir,
        records: out.records,
        summary,
    })
}

/// Measured cost averaged over epochs.
pub fn mean_measured_cost(records: &[RunRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.measured_cost).sum::<f64>() / records.len() as f64
}

/// Evaluates a checkpoint on the configured data and writes `summary.json`
/// to the output directory.
pub fn eval_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<(PathBuf, Summary)> {
    cfg.validate()?;
    let c = Container::load(checkpoint)?;
    let (_, eval_set) = cfg.datasets()?;
    let mut summary = match cfg.precision {
        Precision::F32 => evaluate(&mut model_from_container::<f32>(&c)?, &eval_set, &cfg.eval)?,
        Precision::F64 => evaluate(&mut model_from_container::<f64>(&c)?, &eval_set, &cfg.eval)?,
    };
    if let Some(t) = c.meta.get("train").filter(|t| !t.is_null()) {
        let t: TrainerConfig = serde_json::from_value(t.clone())?;
        summary.method = Some(t.method.name().to_string());
        summary.theoretical_cost = Some(t.resolve()?.theoretical_cost());
    }
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((dir, summary))
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: f64,
    pub n: usize,
    pub sa: f64,
    pub ra: Option<f64>,
    pub h_score: Option<f64>,
    pub measured_cost: f64,
    pub theoretical_cost: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k,n,SA,RA,H_score,measured_cost,theoretical_cost\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.k,
            r.n,
            r.sa,
            cell(r.ra),
            cell(r.h_score),
            r.measured_cost,
            r.theoretical_cost
        )
        .unwrap();
    }
    s
}

/// One entprop run per `(k, n)` pair, each in `<output>/k{k}_n{n}`, plus
/// `<output>/sweep.csv`. An empty list keeps the base value.
pub fn sweep(base: &ExperimentConfig, ks: &[f64], ns: &[usize]) -> Result<Vec<SweepRow>> {
    let tc = base.trainer()?;
    if tc.method != Method::EntProp {
        return Err(cfg_err(format!("sweep varies k and n of entprop, got method {}", tc.method)));
    }
    let plan = tc.resolve()?;
    let ks = if ks.is_empty() { vec![plan.k] } else { ks.to_vec() };
    let ns = if ns.is_empty() {
        vec![tc.n.unwrap_or(1)]
    } else {
        ns.to_vec()
    };
    // Validate the whole grid before running any of it.
    let mut grid = Vec::new();
    for &k in &ks {
        for &n in &ns {
            let mut c = base.clone();
            let t = c.train.as_mut().expect("checked above");
            t.k = Some(k);
            t.n = Some(n);
            c.output.dir = base.output.dir.join(format!("k{k}_n{n}"));
            c.validate()?;
            grid.push((k, n, c));
        }
    }
    let mut rows = Vec::new();
    for (k, n, c) in grid {
        let o = train(&c)?;
        let t = o.summary.theoretical_cost.unwrap_or(f64::NAN);
        rows.push(SweepRow {
            k,
            n,
            sa: o.summary.sa,
            ra: o.summary.ra,
            h_score: o.summary.h_score,
            measured_cost: o.summary.measured_cost.unwrap_or(f64::NAN),
            theoretical_cost: t,
        });
    }
    let dir = base.output_dir();
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub cost: Option<f64>,
    pub measured_cost: Option<f64>,
    pub sa: f64,
    pub ra: Option<f64>,
    pub h_score: Option<f64>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn read_summary(dir: &Path) -> Result<Summary> {
    let p = dir.join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::InvalidArgument(format!("{} has no summary.json", dir.display())),
        _ => e.into(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Rows for the given run directories, best H_score first (runs without
/// RA last).
pub fn report_rows(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for d in dirs {
        let s = read_summary(d)?;
        rows.push(ReportRow {
            run: run_name(d),
            method: s.method.unwrap_or_else(|| "?".into()),
            cost: s.theoretical_cost,
            measured_cost: s.measured_cost,
            sa: s.sa,
            ra: s.ra,
            h_score: s.h_score,
        });
    }
    rows.sort_by(|a, b| {
        let key = |r: &ReportRow| r.h_score.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.run.cmp(&b.run))
    });
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("run,method,cost,measured_cost,SA,RA,H_score\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.run,
            r.method,
            cell(r.cost),
            cell(r.measured_cost),
            r.sa,
            cell(r.ra),
            cell(r.h_score)
        )
        .unwrap();
    }
    s
}

/// Aligned text table with accuracies in percent.
pub fn report_text(rows: &[ReportRow]) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
    let table: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.method.clone(),
                r.cost.map(|c| format!("{c:.2}N")).unwrap_or_else(|| "-".into()),
                pct(Some(r.sa)),
                pct(r.ra),
                pct(r.h_score),
            ]
        })
        .collect();
    let header = ["run", "method", "cost", "SA", "RA", "H_score"].map(String::from);
    let mut width = header.clone().map(|h| h.len());
    for row in &table {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    for row in std::iter::once(&header).chain(&table) {
        let line: Vec<String> = row
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}

fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(dir.join("records.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn selection_histogram(dir: &Path) -> Result<BTreeMap<u64, usize>> {
    let text = std::fs::read_to_string(dir.join("selection_bias.csv"))?;
    let mut h = BTreeMap::new();
    for line in text.lines().skip(1) {
        let c = line
            .split(',')
            .nth(1)
            .and_then(|c| c.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::Format(format!("bad selection_bias.csv line {line:?}")))?;
        *h.entry(c).or_insert(0) += 1;
    }
    Ok(h)
}

/// Writes `report.csv`, `report.txt` and figure data under `out`:
/// `figures/cost_vs_h.csv`, `figures/entropy.csv` (per-epoch entropy of
/// every run) and `figures/selection_histogram.csv`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let rows = report_rows(dirs)?;
    std::fs::create_dir_all(out.join("figures"))?;
    write_atomic(&out.join("report.csv"), report_csv(&rows).as_bytes())?;
    write_atomic(&out.join("report.txt"), report_text(&rows).as_bytes())?;

    let mut cost = String::from("run,method,cost,measured_cost,H_score\n");
    for r in &rows {
        writeln!(cost, "{},{},{},{},{}", r.run, r.method, cell(r.cost), cell(r.measured_cost), cell(r.h_score)).unwrap();
    }
    write_atomic(&out.join("figures/cost_vs_h.csv"), cost.as_bytes())?;

    let mut ent = String::from("run,epoch,clean_mean,clean_sd,transformed_mean,transformed_sd\n");
    let mut hist = String::from("run,selection_count,samples\n");
    for d in dirs {
        let name = run_name(d);
        if d.join("records.jsonl").exists() {
            for r in read_records(d)? {
                writeln!(
                    ent,
                    "{name},{},{},{},{},{}",
                    r.epoch,
                    cell(r.clean_entropy_mean),
                    cell(r.clean_entropy_sd),
                    cell(r.transformed_entropy_mean),
                    cell(r.transformed_entropy_sd)
                )
                .unwrap();
            }
        }
        if d.join("selection_bias.csv").exists() {
            for (c, n) in selection_histogram(d)? {
                writeln!(hist, "{name},{c},{n}").unwrap();
            }
        }
    }
    write_atomic(&out.join("figures/entropy.csv"), ent.as_bytes())?;
    write_atomic(&out.join("figures/selection_histogram.csv"), hist.as_bytes())?;
    Ok(rows)
}
