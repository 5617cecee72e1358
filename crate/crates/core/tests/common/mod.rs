//! Shared helpers for the integration tests.
#![allow(dead_code)]

use dda_core::models::{
    AttrPredictorConfig, AttributePredictor, Denoiser, DenoiserConfig, DenoiserMode, DownstreamConfig,
    DownstreamModel, Trainable,
};
use dda_core::data::Task;
use dda_core::nn::{Graph, Padding, Tensor, Var};
use dda_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const SHAPES_PER_OP: usize = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values with magnitude in [0.1, 1] so ReLU kinks are never within `H`.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// Distinct values at least 0.01 apart, so pooling has no ties.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Norm-wise relative difference `|a - b| / (|a| + |b|)`, zero when both
/// vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-300 {
        0.0
    } else {
        d / (na + nb)
    }
}

/// Worst relative error between reverse-mode gradients and central
/// differences over all inputs of `build`.
pub fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let l = build(&mut g, &vars).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let l = build(&mut g, &vars).unwrap();
    let grads = g.gradients(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += H;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * H;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Reduces any output to a scalar through a squared error against a fixed
/// random target.
pub fn to_scalar(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let t = uniform(&mut rng(seed), &shape);
    let t = g.input(t);
    g.mse(out, t)
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn conv_case(r: &mut ChaCha8Rng) -> f64 {
    let b = r.random_range(1..=2);
    let cin = r.random_range(1..=3);
    let cout = r.random_range(1..=3);
    let k = [1, 3, 5][r.random_range(0..3)];
    let len = r.random_range(k.max(4)..=12);
    let stride = r.random_range(1..=2);
    let pad = if r.random() { Padding::Same } else { Padding::Valid };
    let bias = r.random::<bool>();
    let mut inputs = vec![uniform(r, &[b, cin, len]), uniform(r, &[cout, cin, k])];
    if bias {
        inputs.push(uniform(r, &[cout]));
    }
    check(&inputs, |g, v| {
        let y = g.conv1d(v[0], v[1], v.get(2).copied(), stride, pad)?;
        to_scalar(g, y, 1)
    })
}

fn dense_case(r: &mut ChaCha8Rng) -> f64 {
    let (b, fin, fout) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
    let inputs = [uniform(r, &[b, fin]), uniform(r, &[fout, fin]), uniform(r, &[fout])];
    check(&inputs, |g, v| {
        let y = g.dense(v[0], v[1], Some(v[2]))?;
        to_scalar(g, y, 2)
    })
}

fn shape3(r: &mut ChaCha8Rng) -> [usize; 3] {
    [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=8)]
}

fn tanh_case(r: &mut ChaCha8Rng) -> f64 {
    let s = shape3(r);
    let x = uniform(r, &s).map(|v| 2.0 * v);
    check(&[x], |g, v| {
        let y = g.tanh(v[0]);
        to_scalar(g, y, 3)
    })
}

fn relu_case(r: &mut ChaCha8Rng) -> f64 {
    let s = shape3(r);
    let x = off_zero(r, &s);
    check(&[x], |g, v| {
        let y = g.relu(v[0]);
        to_scalar(g, y, 4)
    })
}

fn maxpool_case(r: &mut ChaCha8Rng) -> f64 {
    let f = r.random_range(2..=3);
    let [b, c, _] = shape3(r);
    let len = f * r.random_range(1..=4);
    let x = distinct(r, &[b, c, len]);
    check(&[x], |g, v| {
        let y = g.maxpool1d(v[0], f)?;
        to_scalar(g, y, 5)
    })
}

fn upsample_case(r: &mut ChaCha8Rng) -> f64 {
    let f = r.random_range(2..=3);
    let s = shape3(r);
    let x = uniform(r, &s);
    check(&[x], |g, v| {
        let y = g.upsample_nearest(v[0], f)?;
        to_scalar(g, y, 6)
    })
}

fn concat_case(r: &mut ChaCha8Rng) -> f64 {
    let [b, c1, l] = shape3(r);
    let c2 = r.random_range(1..=3);
    let inputs = [uniform(r, &[b, c1, l]), uniform(r, &[b, c2, l])];
    check(&inputs, |g, v| {
        let y = g.concat_channels(v[0], v[1])?;
        to_scalar(g, y, 7)
    })
}

fn add_case(r: &mut ChaCha8Rng) -> f64 {
    let s = shape3(r);
    let inputs = [uniform(r, &s), uniform(r, &s)];
    check(&inputs, |g, v| {
        let y = g.add(v[0], v[1])?;
        to_scalar(g, y, 8)
    })
}

fn add_channel_case(r: &mut ChaCha8Rng) -> f64 {
    let [b, c, l] = shape3(r);
    let inputs = [uniform(r, &[b, c, l]), uniform(r, &[b, c])];
    check(&inputs, |g, v| {
        let y = g.add_channel(v[0], v[1])?;
        to_scalar(g, y, 9)
    })
}

fn broadcast_case(r: &mut ChaCha8Rng) -> f64 {
    let [b, c, l] = shape3(r);
    let e = uniform(r, &[b, c]);
    check(&[e], |g, v| {
        let y = g.broadcast_length(v[0], l)?;
        to_scalar(g, y, 10)
    })
}

fn reshape_case(r: &mut ChaCha8Rng) -> f64 {
    let [b, c, l] = shape3(r);
    let x = uniform(r, &[b, c, l]);
    check(&[x], |g, v| {
        let y = g.reshape(v[0], vec![b, c * l])?;
        to_scalar(g, y, 11)
    })
}

fn mse_case(r: &mut ChaCha8Rng) -> f64 {
    let s = shape3(r);
    let inputs = [uniform(r, &s), uniform(r, &s)];
    check(&inputs, |g, v| g.mse(v[0], v[1]))
}

fn softmax_ce_case(r: &mut ChaCha8Rng) -> f64 {
    let (b, c) = (r.random_range(1..=5), r.random_range(2..=5));
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let x = uniform(r, &[b, c]).map(|v| 3.0 * v);
    check(&[x], |g, v| g.softmax_ce(v[0], &labels))
}

fn attr_model_case(r: &mut ChaCha8Rng) -> f64 {
    let len = 32;
    let cfg = AttrPredictorConfig {
        input_len: len,
        hidden: vec![4, 5],
        output_len: 15,
    };
    let m = AttributePredictor::new(cfg, r.random());
    let x = uniform(r, &[2, len]);
    check(&[x], |g, v| {
        let y = m.forward(g, v[0])?;
        to_scalar(g, y, 12)
    })
}

fn denoiser_case(r: &mut ChaCha8Rng) -> f64 {
    let mode = if r.random() { DenoiserMode::Dpm } else { DenoiserMode::Dae };
    let mut cfg = DenoiserConfig::new(32, mode, true);
    cfg.widths = vec![2, 3];
    cfg.time_embed_dim = 4;
    let mut m = Denoiser::new(cfg, r.random()).unwrap();
    let mut pr = rng(r.random());
    // the output and attribute layers start at zero; give them weight so
    // gradients flow through every path
    for (name, p) in m.params_mut().iter_mut() {
        if name.starts_with("out") || name.ends_with(".attr.w") {
            p.value = uniform(&mut pr, p.value.shape());
        }
    }
    let x = uniform(r, &[2, 1, 32]);
    let a = uniform(r, &[2, 15]);
    let ts = [r.random_range(1..=100), r.random_range(1..=100)];
    check(&[x], |g, v| {
        let y = m.forward(g, v[0], &ts, Some(&a))?;
        to_scalar(g, y, 13)
    })
}

fn downstream_case(r: &mut ChaCha8Rng) -> f64 {
    let cfg = DownstreamConfig {
        input_len: 16,
        task: Task::Classification { n_classes: 3 },
        branch_channels: 2,
        conv_channels: [2, 3],
        fc: [4, 3],
    };
    let m = DownstreamModel::new(cfg, r.random()).unwrap();
    let x = distinct(r, &[2, 1, 16]);
    let targets = [r.random_range(0..3) as f64, r.random_range(0..3) as f64];
    check(&[x], |g, v| m.loss(g, v[0], &targets))
}

/// Worst relative error per operation over `SHAPES_PER_OP` random shapes.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let cases: Vec<(&'static str, Case)> = vec![
        ("conv1d", Box::new(conv_case)),
        ("dense", Box::new(dense_case)),
        ("tanh", Box::new(tanh_case)),
        ("relu", Box::new(relu_case)),
        ("maxpool1d", Box::new(maxpool_case)),
        ("upsample_nearest", Box::new(upsample_case)),
        ("concat_channels", Box::new(concat_case)),
        ("add", Box::new(add_case)),
        ("add_channel", Box::new(add_channel_case)),
        ("broadcast_length", Box::new(broadcast_case)),
        ("reshape", Box::new(reshape_case)),
        ("mse", Box::new(mse_case)),
        ("softmax_ce", Box::new(softmax_ce_case)),
        ("attribute_predictor", Box::new(attr_model_case)),
        ("denoiser", Box::new(denoiser_case)),
        ("downstream", Box::new(downstream_case)),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng(1000 + i as u64);
            let worst = (0..SHAPES_PER_OP).map(|_| case(&mut r)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Attributes whose tolerance is 1e-9: the moment-based ones.
pub const MOMENT_ATTRIBUTES: [&str; 9] = [
    "oscillation",
    "noise",
    "variability",
    "std",
    "peculiarity",
    "dynamic_range",
    "symmetry",
    "min",
    "max",
];

/// Reference segments and their attribute vectors.
pub fn attribute_reference() -> Vec<(Vec<f64>, Vec<f64>)> {
    let text = include_str!("../fixtures/attr_reference.csv");
    text.lines()
        .map(|line| {
            let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(v.len(), 32 + 15);
            (v[..32].to_vec(), v[32..].to_vec())
        })
        .collect()
}

/// Scaled error `|a - b| / max(1, |b|)`.
pub fn scaled_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Worst scaled error per attribute over the reference segments.
pub fn attribute_errors() -> Vec<(&'static str, f64)> {
    use dda_core::meta_attr::{extract_segment_attributes, Segment, ATTRIBUTE_NAMES};
    let mut worst = [0.0f64; 15];
    for (seg, want) in attribute_reference() {
        let got = extract_segment_attributes(Segment::new(&seg).unwrap());
        for k in 0..15 {
            worst[k] = worst[k].max(scaled_err(got[k], want[k]));
        }
    }
    ATTRIBUTE_NAMES.iter().copied().zip(worst).collect()
}

pub fn attribute_tolerance(name: &str) -> f64 {
    if name == "peaks" {
        0.0
    } else if MOMENT_ATTRIBUTES.contains(&name) {
        1e-9
    } else {
        1e-6
    }
}

/// Worst absolute error of `predict_x0(q_sample(x0, t, eps), eps, t)` over
/// every timestep of the default schedule.
pub fn diffusion_identity_error() -> f64 {
    use dda_core::diffusion::ScheduleSpec;
    let s = ScheduleSpec::default().build().unwrap();
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    for t in 1..=s.steps() {
        let x0 = uniform(&mut r, &[16]).map(|v| 3.0 * v).into_data();
        let eps: Vec<f64> = (0..16).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let back = s.predict_x0(&xt, &eps, t).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest deviation, in standard errors, of the per-point mean and
/// variance of `q_sample` from the closed form over 10,000 draws.
pub fn diffusion_moment_z() -> f64 {
    use dda_core::diffusion::ScheduleSpec;
    let s = ScheduleSpec::default().build().unwrap();
    let n = 10_000;
    let x0 = [1.5, -0.7, 0.0, 2.2];
    let mut r = rng(22);
    let mut worst: f64 = 0.0;
    for t in [1, 10, 50, 100] {
        let ab = s.alpha_bar(t).unwrap();
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let eps: Vec<f64> = (0..4).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            for k in 0..4 {
                sum[k] += xt[k];
                sq[k] += xt[k] * xt[k];
            }
        }
        let var = 1.0 - ab;
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let emp_var = (sq[k] - n as f64 * mean * mean) / (n as f64 - 1.0);
            let se_mean = (var / n as f64).sqrt();
            let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
            worst = worst
                .max((mean - ab.sqrt() * x0[k]).abs() / se_mean)
                .max((emp_var - var).abs() / se_var);
        }
    }
    worst
}
