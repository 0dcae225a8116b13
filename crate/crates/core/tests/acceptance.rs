//! Acceptance runner: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Always exits 0 so that a documented shortfall does not break the test
//! suite; set `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{all_grad_cases, expected_passes, grad_error, image_task, rng, train_cnn, uniform};
use entprop::attack::{epsilon_schedule, pgd, AttackConfig, AttackRoute, PIXEL};
use entprop::augment::Targets;
use entprop::checkpoint::model_to_container;
use entprop::corrupt::CorruptionSpec;
use entprop::data::Dataset;
use entprop::eval::{frechet_clean_vs_transformed, h_score, robust_accuracy, standard_accuracy, FeatureTransform};
use entprop::frechet::{fit_gaussian, frechet_distance, GaussianSummary};
use entprop::selection::{entropy, top_k_select, uncertainty_score, UncertaintyMetric};
use entprop::train::{Method, RunOutput, RunRecord, TrainerConfig};
use entprop::{Mode, Model, ModelSpec, Route, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, limit: Duration, detail: String) -> Outcome {
    let t = start.elapsed();
    check(t < limit, format!("{detail}; {:.1}s (limit {}s)", t.as_secs_f64(), limit.as_secs()))
}

// 1 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = all_grad_cases::<f64>();
    let mut worst = (0.0f64, String::new());
    for c in &cases {
        let e = grad_error(c, 1e-6).map_err(|e| format!("{}: {e}", c.name))?;
        if !(e < 1e-4) {
            return Err(format!("{}: relative error {e:.3e}", c.name));
        }
        if e > worst.0 {
            worst = (e, c.name.clone());
        }
    }
    within(
        start,
        Duration::from_secs(120),
        format!("{} cases, worst {:.2e} ({})", cases.len(), worst.0, worst.1),
    )
}

// 2 -------------------------------------------------------------------------

fn formulas() -> Outcome {
    // (SA, RA, H) triples in percent.
    let rows = [
        ("Vanilla/C100", 79.30, 51.01, 62.08),
        ("MixProp/C100", 81.84, 55.55, 66.18),
        ("MixProp/Cars", 91.30, 51.13, 65.55),
        ("EntProp(0.6,5)/Pets", 92.15, 66.75, 77.42),
    ];
    let mut worst: f64 = 0.0;
    for (name, sa, ra, h) in rows {
        let got = h_score(sa, ra).map_err(|e| e.to_string())?;
        let d = (got - h).abs();
        if d > 0.01 {
            return Err(format!("{name}: {got:.4} vs {h}"));
        }
        worst = worst.max(d);
    }
    let u = Tensor::<f64>::from_f64(&[1, 100], &[0.01; 100]).unwrap();
    let h = entropy(&u).map_err(|e| e.to_string())?[0];
    let dh = (h - 100f64.ln()).abs();
    check(dh <= 1e-9, format!("4 rows, worst |dH| {worst:.4}; uniform-100 entropy off by {dh:.1e}"))
}

// 3 -------------------------------------------------------------------------

fn cost_accounting() -> Outcome {
    let start = Instant::now();
    let (train, _) = image_task(8, 100, 1, 0.5, 21);
    let n = train.len();
    let cases: Vec<(TrainerConfig, f64)> = vec![
        (TrainerConfig::new(Method::Vanilla), 1.0),
        (TrainerConfig::new(Method::MixProp), 2.0),
        (TrainerConfig::new(Method::AdvProp), 7.0),
        (TrainerConfig::new(Method::FastAdvProp), 1.2),
        (TrainerConfig::entprop(0.2, 1), 1.2),
        (TrainerConfig::entprop(0.6, 1), 1.6),
        (TrainerConfig::entprop(0.2, 5), 2.0),
        (TrainerConfig::entprop(0.6, 5), 4.0),
    ];
    let mut parts = Vec::new();
    for (cfg, want) in cases {
        let cfg = TrainerConfig { epochs: 1, batch_size: 50, seed: 21, ..cfg };
        let label = match cfg.method {
            Method::EntProp => format!("EntProp({},{})", cfg.k.unwrap(), cfg.n.unwrap()),
            m => m.name().to_string(),
        };
        let (_, out) = train_cnn(&train, &cfg, 21);
        let (passes, slack) = expected_passes(&cfg, n);
        let r = &out.records[0];
        if r.forward_passes != passes || r.backward_passes != passes {
            return Err(format!("{label}: {}/{} passes, expected {passes}", r.forward_passes, r.backward_passes));
        }
        if (r.measured_cost - want).abs() > slack + 1e-12 {
            return Err(format!("{label}: measured {} vs {want}N", r.measured_cost));
        }
        parts.push(format!("{label} {:.2}N", r.measured_cost));
    }
    within(start, Duration::from_secs(300), parts.join(", "))
}

// 4 -------------------------------------------------------------------------

fn randomize_abn(model: &mut Model<f32>, seed: u64) {
    let r = &mut rng(seed);
    for layer in model.norm_layers_mut() {
        let abn = &mut layer.abn;
        for v in abn.gamma.value.data_mut().iter_mut().chain(abn.beta.value.data_mut()) {
            *v = r.random_range(-3.0..3.0);
        }
        for v in abn.running_mean.iter_mut() {
            *v = r.random_range(-3.0..3.0);
        }
        for v in abn.running_var.iter_mut() {
            *v = r.random_range(0.01..5.0);
        }
        abn.momentum = r.random_range(0.01..0.99);
        abn.eps = r.random_range(1e-6..1e-2);
    }
}

fn disentanglement() -> Outcome {
    let (train, test) = image_task(8, 32, 10, 0.5, 4);
    let cfg = TrainerConfig { epochs: 3, seed: 4, ..TrainerConfig::entprop(0.5, 2) };
    let mut m = Model::<f32>::build(&ModelSpec::small_cnn([1, 8, 8], 3, 4)).unwrap();
    m.enable_isolation_audit();
    entprop::train::run_training(&mut m, &train, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let audit = m.isolation_audit().unwrap();
    if audit.violations != 0 || audit.aux_passes == 0 {
        return Err(format!("{audit:?}"));
    }
    let x: Tensor<f32> = test.images.cast();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let before = bits(&m.predict(&x, Route::Main, Mode::Eval).unwrap());
    for seed in 0..10 {
        randomize_abn(&mut m, seed);
        if bits(&m.predict(&x, Route::Main, Mode::Eval).unwrap()) != before {
            return Err(format!("main eval logits changed after ABN randomization {seed}"));
        }
    }
    Ok(format!(
        "{} main and {} aux forwards, 0 cross-route changes; logits unchanged under 10 ABN randomizations",
        audit.main_passes, audit.aux_passes
    ))
}

// 5 -------------------------------------------------------------------------

fn checkpoint_bytes(m: &Model<f32>) -> Vec<u8> {
    model_to_container(m).unwrap().to_bytes().unwrap()
}

fn equivalence() -> Outcome {
    let (train, _) = image_task(8, 16, 1, 0.5, 5);
    let mut vanilla = TrainerConfig { epochs: 2, seed: 5, ..TrainerConfig::new(Method::Vanilla) };
    vanilla.use_mixup = Some(true);
    let mut zero = TrainerConfig { epochs: 2, seed: 5, ..TrainerConfig::entprop(0.0, 1) };
    zero.use_mixup = Some(true);
    let (a, _) = train_cnn(&train, &vanilla, 5);
    let (b, _) = train_cnn(&train, &zero, 5);
    let (ca, cb) = (checkpoint_bytes(&a), checkpoint_bytes(&b));
    if ca != cb {
        return Err("k = 0 checkpoint differs from MixUp vanilla".into());
    }
    let s5 = epsilon_schedule(5).map_err(|e| e.to_string())?;
    let s1 = epsilon_schedule(1).map_err(|e| e.to_string())?;
    check(
        s5 == (6.0, 1.0) && s1 == (1.0, 1.0),
        format!("checkpoints identical ({} bytes); schedule n=5 {s5:?}, n=1 {s1:?}", ca.len()),
    )
}

// 6 -------------------------------------------------------------------------

fn attack_contract() -> Outcome {
    let mut m = Model::<f64>::build(&ModelSpec::mlp(6, &[8], 3, 2)).unwrap();
    let r = &mut rng(606);
    for case in 0..1000 {
        let rows = r.random_range(2..5);
        let mut x = uniform::<f64>(&[rows, 6, 1, 1], 0.0, 1.0, r);
        for v in x.data_mut().iter_mut() {
            match r.random_range(0..6) {
                0 => *v = 0.0,
                1 => *v = 1.0,
                _ => {}
            }
        }
        let y = Targets::Plain((0..rows).map(|_| r.random_range(0..3)).collect());
        let eps = r.random_range(0.0..12.0);
        let free = r.random_bool(0.5);
        let cfg = AttackConfig { n: r.random_range(1..4), epsilon: eps, alpha: eps * r.random_range(0.0..=1.0), free_first_step: free };
        let seed = uniform::<f64>(x.shape(), -1.0, 1.0, r);
        let route = if r.random_bool(0.5) { AttackRoute::aux_train() } else { AttackRoute::main_eval() };
        let out = pgd(&mut m, &x, &y, &cfg, route, free.then_some(&seed)).map_err(|e| format!("case {case}: {e}"))?;
        for (a, b) in out.x_adv.data().iter().zip(x.data()) {
            if (a - b).abs() > eps * PIXEL + 1e-12 || !(0.0..=1.0).contains(a) {
                return Err(format!("case {case}: {b} -> {a} with eps {eps}"));
            }
        }
    }
    let x = uniform::<f64>(&[4, 6, 1, 1], 0.0, 1.0, r);
    let seed = uniform::<f64>(x.shape(), -1.0, 1.0, r);
    let cfg = AttackConfig { n: 1, epsilon: 1.0, alpha: 1.0, free_first_step: true };
    let before = m.counters();
    let out = pgd(&mut m, &x, &Targets::Plain(vec![0, 1, 2, 0]), &cfg, AttackRoute::aux_train(), Some(&seed))
        .map_err(|e| e.to_string())?;
    let d = m.counters() - before;
    check(
        (out.forwards, out.backwards, d.forward, d.backward) == (0, 0, 0, 0),
        format!("1000 cases inside the ball and [0, 1]; free n=1 used {} forward / {} backward passes", d.forward, d.backward),
    )
}

// 7-9 shared runs ------------------------------------------------------------

const SEEDS: u64 = 5;
const EPOCHS: usize = 30;

struct Trained {
    sa: f64,
    ra: f64,
    h: f64,
    out: RunOutput,
    model: Model<f32>,
    test: Dataset,
}

fn config(which: &str, seed: u64) -> TrainerConfig {
    let mut c = match which {
        "vanilla" => TrainerConfig::new(Method::Vanilla),
        "entprop" => TrainerConfig::entprop(0.5, 1),
        _ => {
            let mut c = TrainerConfig::entprop(0.5, 1);
            c.use_mixup = Some(false);
            c.use_free = Some(false);
            c
        }
    };
    c.epochs = EPOCHS;
    c.seed = seed;
    c
}

fn train_and_score(which: &str, seed: u64) -> Trained {
    let (train, test) = image_task(16, 64, 50, 0.8, seed);
    let (mut model, out) = train_cnn(&train, &config(which, seed), seed);
    let sa = standard_accuracy(&mut model, &test).unwrap();
    let ra = robust_accuracy(&mut model, &test, &CorruptionSpec::full_suite(), 99).unwrap();
    let h = h_score(sa, ra).unwrap();
    Trained { sa, ra, h, out, model, test }
}

struct Runs {
    vanilla: Vec<Trained>,
    entprop: Vec<Trained>,
    ablation: Vec<Trained>,
    elapsed: Duration,
}

fn shared_runs() -> Runs {
    let start = Instant::now();
    let run = |w: &str| (0..SEEDS).map(|s| train_and_score(w, s)).collect::<Vec<_>>();
    let (vanilla, entprop, ablation) = (run("vanilla"), run("entprop"), run("ablation"));
    Runs { vanilla, entprop, ablation, elapsed: start.elapsed() }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Standard error of a difference of two equal-size sample means.
fn pooled_se(a: &[f64], b: &[f64]) -> f64 {
    let ((_, sa), (_, sb)) = (mean_sd(a), mean_sd(b));
    ((sa * sa + sb * sb) / a.len() as f64).sqrt()
}

fn directional(runs: &Runs) -> Outcome {
    let pick = |v: &[Trained], f: fn(&Trained) -> f64| v.iter().map(f).collect::<Vec<_>>();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, f) in [("RA", (|t: &Trained| t.ra) as fn(&Trained) -> f64), ("H", |t: &Trained| t.h)] {
        let (v, e) = (pick(&runs.vanilla, f), pick(&runs.entprop, f));
        let diff = mean_sd(&e).0 - mean_sd(&v).0;
        let se = pooled_se(&e, &v);
        ok &= diff > se;
        parts.push(format!("{name} {:.3} vs {:.3} (diff {diff:.3}, SE {se:.3})", mean_sd(&e).0, mean_sd(&v).0));
    }
    let sa = (mean_sd(&pick(&runs.vanilla, |t| t.sa)).0, mean_sd(&pick(&runs.entprop, |t| t.sa)).0);
    parts.push(format!("SA {:.3} vs {:.3}", sa.1, sa.0));
    let detail = format!("EntProp vs Vanilla over {SEEDS} seeds: {}", parts.join("; "));
    let secs = runs.elapsed.as_secs_f64();
    check(ok && secs < 900.0, format!("{detail}; 15 runs in {secs:.0}s (limit 900s)"))
}

fn epoch_gap(r: &RunRecord) -> Option<f64> {
    Some(r.transformed_entropy_mean? - r.clean_entropy_mean?)
}

/// Fraction of epochs after the first with transformed >= clean entropy, and
/// the mean gap over those epochs.
fn entropy_overlap(out: &RunOutput) -> (f64, f64) {
    let gaps: Vec<f64> = out.records.iter().skip(1).map(|r| epoch_gap(r).unwrap_or(f64::NEG_INFINITY)).collect();
    let frac = gaps.iter().filter(|g| **g >= 0.0).count() as f64 / gaps.len() as f64;
    (frac, gaps.iter().sum::<f64>() / gaps.len() as f64)
}

fn entropy_diagnostic(runs: &Runs) -> Outcome {
    let full: Vec<(f64, f64)> = runs.entprop.iter().map(|t| entropy_overlap(&t.out)).collect();
    let abl: Vec<(f64, f64)> = runs.ablation.iter().map(|t| entropy_overlap(&t.out)).collect();
    let min_frac = full.iter().map(|p| p.0).fold(1.0, f64::min);
    let full_gap = full.iter().map(|p| p.1).sum::<f64>() / full.len() as f64;
    let abl_gap = abl.iter().map(|p| p.1).sum::<f64>() / abl.len() as f64;
    let detail = format!(
        "EntProp epochs with transformed >= clean entropy: min {:.0}% over seeds; mean gap EntProp {full_gap:.3}, ablation {abl_gap:.3}",
        100.0 * min_frac
    );
    check(min_frac >= 0.8 && abl_gap < full_gap, detail)
}

fn summary(mean: &[f64], var: &[f64]) -> GaussianSummary {
    GaussianSummary {
        mean: DVector::from_column_slice(mean),
        covariance: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        count: 100,
    }
}

fn frechet(runs: &mut Runs) -> Outcome {
    let r = &mut rng(9);
    let feats = uniform::<f64>(&[40, 6], -2.0, 2.0, r);
    let g = fit_gaussian(&feats).map_err(|e| e.to_string())?;
    let self_d = frechet_distance(&g, &g).map_err(|e| e.to_string())?;
    let mut worst_1d: f64 = 0.0;
    for _ in 0..100 {
        let (m1, m2): (f64, f64) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let (v1, v2): (f64, f64) = (r.random_range(0.01..4.0), r.random_range(0.01..4.0));
        let want = (m1 - m2).powi(2) + v1 + v2 - 2.0 * (v1 * v2).sqrt();
        let got = frechet_distance(&summary(&[m1], &[v1]), &summary(&[m2], &[v2])).map_err(|e| e.to_string())?;
        worst_1d = worst_1d.max((got - want).abs());
    }
    // Shift of clean features under each transform, measured on the vanilla models.
    let (mut fm, mut fe) = (Vec::new(), Vec::new());
    for t in runs.vanilla.iter_mut() {
        let mix = FeatureTransform::Mixup { alpha: 1.0 };
        let ent = FeatureTransform::Entprop { k: 0.5, n: 1, alpha: 1.0 };
        fm.push(frechet_clean_vs_transformed(&mut t.model, &t.test, mix, 5).map_err(|e| e.to_string())?);
        fe.push(frechet_clean_vs_transformed(&mut t.model, &t.test, ent, 5).map_err(|e| e.to_string())?);
    }
    let (mm, me) = (mean_sd(&fm).0, mean_sd(&fe).0);
    check(
        self_d.abs() <= 1e-8 && worst_1d <= 1e-10 && me > mm,
        format!("d(a,a) = {self_d:.1e}; 1-D closed form off by {worst_1d:.1e}; mean distance EntProp-transformed {me:.3} vs MixUp {mm:.3}"),
    )
}

// 10 ------------------------------------------------------------------------

fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

fn selection(runs: &Runs) -> Outcome {
    let r = &mut rng(10);
    let transforms: [fn(f64) -> f64; 4] = [|x| 2.0 * x + 1.0, |x| x * x * x, |x| (x / 10.0).exp(), f64::atan];
    for case in 0..1000 {
        let len = r.random_range(1..40);
        // A coarse grid so ties occur.
        let s: Vec<f64> = (0..len).map(|_| r.random_range(-50i32..=50) as f64 / 10.0).collect();
        let k = r.random_range(0.0..=1.0);
        let f = transforms[case % 4];
        let t: Vec<f64> = s.iter().map(|&x| f(x)).collect();
        if top_k_select(&s, k).unwrap() != top_k_select(&t, k).unwrap() {
            return Err(format!("case {case}: selection changed under transform {}", case % 4));
        }
    }

    let mut recounted = 0;
    for t in &runs.entprop {
        let mut counts = vec![0u64; t.out.selection.counts().len()];
        for step in &t.out.step_selections {
            for &id in step {
                counts[id] += 1;
            }
        }
        let mut hist = std::collections::BTreeMap::new();
        for &c in &counts {
            *hist.entry(c).or_insert(0usize) += 1;
        }
        if t.out.selection.counts() != &counts[..] || t.out.selection.histogram() != hist.into_iter().collect::<Vec<_>>() {
            return Err("selection histogram differs from a recount of the step logs".into());
        }
        recounted += t.out.step_selections.len();
    }

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (n, c) = (r.random_range(1..6), r.random_range(2..7));
        let z = uniform::<f64>(&[n, c], -5.0, 5.0, r);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let score = |m| uncertainty_score(&z, Some(&y), m).unwrap();
        let got = [
            score(UncertaintyMetric::Entropy),
            score(UncertaintyMetric::CrossEntropy),
            score(UncertaintyMetric::Confidence),
            score(UncertaintyMetric::LogitMargin),
        ];
        for i in 0..n {
            let p = naive_softmax(z.row(i));
            let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
            let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let other = p.iter().enumerate().filter(|(j, _)| *j != y[i]).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
            let want = [h, -p[y[i]].ln(), -top, other - p[y[i]]];
            for (g, w) in got.iter().zip(want) {
                worst = worst.max((g[i] - w).abs());
            }
        }
    }
    check(
        worst < 1e-10,
        format!("1000 transform cases; {recounted} logged steps recounted; metrics off by at most {worst:.1e}"),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &res {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {id}. {name}: {detail}");
    res.is_ok()
}

fn main() {
    let mut ok = vec![
        run(1, "gradient check", gradients),
        run(2, "H score and entropy formulas", formulas),
        run(3, "cost accounting", cost_accounting),
        run(4, "normalization disentanglement", disentanglement),
        run(5, "k = 0 equivalence and epsilon schedule", equivalence),
        run(6, "attack contract", attack_contract),
    ];
    let mut runs = catch_unwind(shared_runs).ok();
    let missing = || Err::<String, String>("shared training runs failed".into());
    match runs.as_mut() {
        Some(r) => {
            ok.push(run(7, "directional robustness", || directional(r)));
            ok.push(run(8, "entropy overlap", || entropy_diagnostic(r)));
            ok.push(run(9, "Frechet distance", || frechet(r)));
            ok.push(run(10, "selection properties", || selection(r)));
        }
        None => {
            for (i, name) in [(7, "directional robustness"), (8, "entropy overlap"), (9, "Frechet distance"), (10, "selection properties")] {
                ok.push(run(i, name, missing));
            }
        }
    }
    let passed = ok.iter().filter(|b| **b).count();
    println!("{passed}/{} criteria passed", ok.len());
    if passed < ok.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
