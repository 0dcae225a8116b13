//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use entprop::data::{synth_clusters, Dataset, SynthShape};
use entprop::gradcheck::{finite_diff_gradient, relative_error};
use entprop::train::{run_training, Method, RunOutput, TrainerConfig};
use entprop::{Graph, Model, ModelSpec, NodeId, Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type BuildFn<T> = Box<dyn Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>>;

/// A differentiable graph over some input tensors.
pub struct GradCase<T> {
    pub name: String,
    pub inputs: Vec<Tensor<T>>,
    pub build: BuildFn<T>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign; keeps away from kinks at 0.
pub fn away_from_zero<T: Real>(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = r.random_range(lo..hi);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Scalar `sum(w * out)` with fixed pseudo-random weights `w`.
fn reduce<T: Real>(g: &mut Graph<T>, out: NodeId) -> Result<NodeId> {
    let shape = g.shape(out)?.to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let w = uniform::<T>(&shape, 0.5, 1.5, &mut rng(0x5eed));
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn evaluate<T: Real>(case: &GradCase<T>, values: &[Tensor<T>], grads: bool) -> Result<(T, Vec<Option<Tensor<T>>>)> {
    let mut g = Graph::new();
    let ids = values
        .iter()
        .map(|v| g.leaf(v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut g, &ids)?;
    let loss = reduce(&mut g, out)?;
    let l = g.value(loss)?.data()[0];
    if grads {
        g.backward(loss)?;
    }
    Ok((l, ids.iter().map(|&i| g.grad(i)).collect()))
}

/// Largest relative error between backprop and central differences over all inputs.
pub fn grad_error<T: Real>(case: &GradCase<T>, h: f64) -> Result<f64> {
    let (_, analytic) = evaluate(case, &case.inputs, true)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.into_iter().enumerate() {
        let a = a.unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        let numeric = finite_diff_gradient(
            |t| {
                let mut vals = case.inputs.clone();
                vals[i] = t.clone();
                Ok(evaluate(case, &vals, false)?.0)
            },
            &case.inputs[i],
            T::of(h),
        )?;
        worst = worst.max(relative_error(&a, &numeric));
    }
    Ok(worst)
}

fn case<T: Real>(
    name: &str,
    inputs: Vec<Tensor<T>>,
    build: impl Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + 'static,
) -> GradCase<T> {
    GradCase {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// One case per differentiable primitive (two for conv and batch norm).
pub fn primitive_cases<T: Real>() -> Vec<GradCase<T>> {
    let r = &mut rng(11);
    // Points clear of the clip boundaries at +-1.
    let clip_in: Vec<f64> = (0..12)
        .map(|i| {
            let v: f64 = r.random_range(0.05..0.95);
            match i % 3 {
                0 => v,
                1 => -v,
                _ => 1.1 + v,
            }
        })
        .collect();
    let bn_mean = [0.2, -0.4, 0.1];
    let bn_var = [0.5, 1.7, 0.9];
    vec![
        case("matmul", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 2], -1.0, 1.0, r)], |g, x| g.matmul(x[0], x[1])),
        case("add_bias", vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)], |g, x| g.add_bias(x[0], x[1])),
        case("conv2d_pad0", vec![uniform(&[2, 2, 5, 5], -1.0, 1.0, r), uniform(&[3, 2, 3, 3], -1.0, 1.0, r)], |g, x| {
            g.conv2d(x[0], x[1], 0)
        }),
        case("conv2d_pad1", vec![uniform(&[1, 2, 4, 4], -1.0, 1.0, r), uniform(&[2, 2, 3, 3], -1.0, 1.0, r)], |g, x| {
            g.conv2d(x[0], x[1], 1)
        }),
        case("avg_pool2d", vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, r)], |g, x| g.avg_pool2d(x[0], 2, 2)),
        case("relu", vec![away_from_zero(&[3, 4], 0.1, 1.0, r)], |g, x| g.relu(x[0])),
        case("add", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], |g, x| g.add(x[0], x[1])),
        case("sub", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], |g, x| g.sub(x[0], x[1])),
        case("mul", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], |g, x| g.mul(x[0], x[1])),
        case("scale", vec![uniform(&[3, 4], -1.0, 1.0, r)], |g, x| g.scale(x[0], T::of(-1.7))),
        case("clip", vec![Tensor::from_f64(&[3, 4], &clip_in).unwrap()], |g, x| g.clip(x[0], T::of(-1.0), T::of(1.0))),
        case("softmax", vec![uniform(&[3, 5], -2.0, 2.0, r)], |g, x| g.softmax(x[0])),
        case("log_softmax", vec![uniform(&[3, 5], -2.0, 2.0, r)], |g, x| g.log_softmax(x[0])),
        case("nll", vec![uniform(&[4, 3], -2.0, 0.0, r)], |g, x| g.nll(x[0], &[2, 0, 1, 1])),
        case("mean", vec![uniform(&[3, 4], -1.0, 1.0, r)], |g, x| g.mean(x[0])),
        case("sum", vec![uniform(&[3, 4], -1.0, 1.0, r)], |g, x| g.sum(x[0])),
        case("reshape", vec![uniform(&[2, 6], -1.0, 1.0, r)], |g, x| g.reshape(x[0], &[3, 4])),
        case("flatten", vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r)], |g, x| g.flatten(x[0])),
        case("channel_affine", vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r)], |g, x| {
            g.channel_affine(x[0], &[T::of(2.0), T::of(0.5), T::of(-1.0)], &[T::of(0.1), T::of(0.0), T::of(-0.3)])
        }),
        case(
            "batch_norm_train_2d",
            vec![uniform(&[5, 3], -1.0, 1.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
            |g, x| Ok(g.batch_norm_train(x[0], x[1], x[2], T::of(1e-5))?.0),
        ),
        case(
            "batch_norm_train_4d",
            vec![uniform(&[3, 3, 2, 2], -1.0, 1.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
            |g, x| Ok(g.batch_norm_train(x[0], x[1], x[2], T::of(1e-5))?.0),
        ),
        case(
            "batch_norm_eval",
            vec![uniform(&[3, 3, 2, 2], -1.0, 1.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
            move |g, x| {
                let m: Vec<T> = bn_mean.iter().map(|&v| T::of(v)).collect();
                let v: Vec<T> = bn_var.iter().map(|&v| T::of(v)).collect();
                g.batch_norm_eval(x[0], x[1], x[2], &m, &v, T::of(1e-5))
            },
        ),
    ]
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Conv(usize),
    Bn,
    Relu,
    Pool,
    MulInput,
    Scale(f64),
    Clip,
}

/// A random conv/BN/pointwise stack ending in a classification loss.
/// The same seed always gives the same graph and inputs.
pub fn composite_case<T: Real>(seed: u64) -> GradCase<T> {
    let r = &mut rng(1000 + seed);
    let (n, mut c, mut h) = (4, 2, 4);
    let mut inputs = vec![uniform::<T>(&[n, c, h, h], 0.0, 1.0, r)];
    let mut steps = Vec::new();
    let depth = r.random_range(3..=5);
    for _ in 0..depth {
        let step = match r.random_range(0..7) {
            0 => Step::Conv(r.random_range(2..=3)),
            1 => Step::Bn,
            2 => Step::Relu,
            3 if h % 2 == 0 && h > 1 => Step::Pool,
            4 => Step::MulInput,
            5 => Step::Scale(r.random_range(-2.0..2.0)),
            6 => Step::Clip,
            _ => Step::Conv(2),
        };
        match step {
            Step::Conv(co) => {
                inputs.push(uniform(&[co, c, 3, 3], -0.5, 0.5, r));
                c = co;
            }
            Step::Bn => {
                inputs.push(uniform(&[c], 0.5, 1.5, r));
                inputs.push(uniform(&[c], -0.5, 0.5, r));
            }
            Step::Pool => h /= 2,
            Step::MulInput => inputs.push(uniform(&[n, c, h, h], 0.5, 1.5, r)),
            _ => {}
        }
        steps.push(step);
    }
    let d = c * h * h;
    inputs.push(uniform(&[d, 3], -0.5, 0.5, r));
    inputs.push(uniform(&[3], -0.1, 0.1, r));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let name = format!("composite_{seed}: {steps:?}");
    case(&name, inputs, move |g, x| {
        let mut cur = x[0];
        let mut next = 1;
        let mut take = || {
            next += 1;
            x[next - 1]
        };
        for s in &steps {
            cur = match *s {
                Step::Conv(_) => g.conv2d(cur, take(), 1)?,
                Step::Bn => {
                    let (gm, bt) = (take(), take());
                    g.batch_norm_train(cur, gm, bt, T::of(1e-5))?.0
                }
                Step::Relu => g.relu(cur)?,
                Step::Pool => g.avg_pool2d(cur, 2, 2)?,
                Step::MulInput => g.mul(cur, take())?,
                Step::Scale(s) => g.scale(cur, T::of(s))?,
                Step::Clip => g.clip(cur, T::of(-5.0), T::of(5.0))?,
            };
        }
        let f = g.flatten(cur)?;
        let (w, b) = (take(), take());
        let z = g.matmul(f, w)?;
        let z = g.add_bias(z, b)?;
        let lp = g.log_softmax(z)?;
        let l = g.nll(lp, &labels)?;
        g.mean(l)
    })
}

pub fn all_grad_cases<T: Real>() -> Vec<GradCase<T>> {
    let mut v = primitive_cases();
    v.extend((0..3).map(composite_case));
    v
}

/// Gratings task: 3 classes of 1x`side`x`side` images.
pub fn image_task(side: usize, train_per_class: usize, test_per_class: usize, spread: f64, seed: u64) -> (Dataset, Dataset) {
    let shape = SynthShape::Image { channels: 1, height: side, width: side };
    (
        synth_clusters(3, shape, train_per_class, spread, seed, 0).unwrap(),
        synth_clusters(3, shape, test_per_class, spread, seed, 1).unwrap(),
    )
}

/// Trains a fresh SmallCNN on `train` with `cfg`.
pub fn train_cnn(train: &Dataset, cfg: &TrainerConfig, model_seed: u64) -> (Model<f32>, RunOutput) {
    let [c, h, w] = train.sample_shape();
    let mut m = Model::<f32>::build(&ModelSpec::small_cnn([c, h, w], train.class_count, model_seed)).unwrap();
    let out = run_training(&mut m, train, cfg, |_, _| Ok(())).unwrap();
    (m, out)
}

pub fn quick_config(method: Method, epochs: usize, seed: u64) -> TrainerConfig {
    TrainerConfig {
        epochs,
        seed,
        ..TrainerConfig::new(method)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// Sample-level forward passes (= backward passes) of one epoch, counted
/// from the method definitions and the batch sizes alone.
pub fn expected_passes(cfg: &TrainerConfig, n: usize) -> (u64, f64) {
    let b = cfg.batch_size;
    let sizes: Vec<usize> = (0..n).step_by(b).map(|s| b.min(n - s)).collect();
    let steps = cfg.n.unwrap_or(match cfg.method {
        Method::AdvProp => 5,
        _ => 1,
    });
    let free = cfg.use_free.unwrap_or(true);
    // Aux-side passes per auxiliary sample: one for the aux branch plus the
    // attack iterations that need a fresh gradient.
    let per_aux = match cfg.method {
        Method::Vanilla => 0,
        Method::MixProp => 1,
        Method::AdvProp => 1 + steps,
        Method::FastAdvProp => 1,
        Method::EntProp if free => steps,
        Method::EntProp => 1,
    } as u64;
    let frac = |bs: usize| match cfg.method {
        Method::Vanilla => 0,
        Method::MixProp | Method::AdvProp => bs,
        Method::FastAdvProp => round_half_up(cfg.p_adv.unwrap_or(0.2) * bs as f64),
        Method::EntProp => round_half_up(cfg.k.unwrap_or(0.2) * bs as f64),
    };
    let mut total = 0u64;
    for &bs in &sizes {
        let m = frac(bs);
        let m = if m < 2 { 0 } else { m };
        total += bs as u64 + per_aux * m as u64;
    }
    // Rounding moves each batch by at most half a sample, and a batch whose
    // selection rounds below two drops its aux branch.
    let slack = per_aux as f64 * (0.5 * sizes.len() as f64 + 2.0) / n as f64;
    (total, slack)
}
