//! Training loops: attribute regression, the denoising autoencoder, the
//! diffusion noise predictor and the downstream model, all sharing one
//! mini-batch Adam loop with patience-based early stopping.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::Augmenter;
use crate::data::Dataset;
use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::meta_attr::{extract_batch, AttributeStandardizer};
use crate::models::{
    AttrPredictorConfig, AttributePredictor, Denoiser, DenoiserConfig, DenoiserMode, DownstreamConfig,
    DownstreamModel, Trainable,
};
use crate::nn::{Adam, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Range the per-batch autoencoder noise rate is drawn from.
    pub noise_rate_range: (f64, f64),
    pub schedule: ScheduleSpec,
    /// Random transforms of the clean training series, drawn per batch by the
    /// attribute and denoiser loops. Downstream training ignores it.
    pub input_jitter: Option<InputJitter>,
    /// Fixed noise draws per validation sample in the denoiser loops.
    pub val_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_steps: 2000,
            eval_every: 50,
            patience: 20,
            seed: 0,
            noise_rate_range: (0.05, 0.5),
            schedule: ScheduleSpec::default(),
            input_jitter: None,
            val_draws: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.noise_rate_range;
        let problem = if self.patience == 0 {
            Some("patience must be >= 1".to_string())
        } else if self.eval_every == 0 {
            Some("eval_every must be >= 1".to_string())
        } else if self.batch_size == 0 || self.max_steps == 0 || self.val_draws == 0 {
            Some("batch_size, max_steps and val_draws must be >= 1".to_string())
        } else if !(self.lr > 0.0 && self.lr.is_finite()) {
            Some(format!("learning rate must be positive, got {}", self.lr))
        } else if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            Some(format!("noise_rate_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"))
        } else {
            None
        };
        if let Some(p) = problem {
            return Err(Error::Config(p));
        }
        if let Some(j) = &self.input_jitter {
            j.validate()?;
        }
        self.schedule.build().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn val_losses(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.val_loss).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.evals {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

/// Builds one mini-batch loss on the graph from training indices.
pub type BatchLoss<'a, M> = dyn FnMut(&M, &mut Graph, &[usize], &mut ChaCha8Rng) -> Result<Var> + 'a;

/// Generic loop. Batches are drawn from a fresh shuffle each epoch; every
/// `eval_every` steps (and at the last step) `val_loss` is evaluated, and the
/// parameters of the best evaluation are restored at the end.
pub fn fit<M: Trainable>(
    model: &mut M,
    cfg: &TrainConfig,
    n_train: usize,
    batch_loss: &mut BatchLoss<'_, M>,
    val_loss: &mut dyn FnMut(&M) -> Result<f64>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Data("no training samples".into()));
    }
    let start = Instant::now();
    let opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    let mut evals = Vec::new();
    let mut best: Option<(usize, f64, _)> = None;
    let mut stale = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    model.params_mut().zero_grad();
    for step in 1..=cfg.max_steps {
        if cursor >= n_train {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n_train);
        let idx = order[cursor..end].to_vec();
        cursor = end;

        let mut g = Graph::new();
        let loss = batch_loss(model, &mut g, &idx, &mut rng)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite training loss {value} at step {step} (batch of {})",
                idx.len()
            )));
        }
        g.backward(loss, model.params_mut())?;
        model.params_mut().adam_step(&opt).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
            other => other,
        })?;
        loss_sum += value;
        loss_n += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = val_loss(model)?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite validation loss at step {step}")));
            }
            evals.push(EvalRecord {
                step,
                train_loss: loss_sum / loss_n as f64,
                val_loss: v,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            (loss_sum, loss_n) = (0.0, 0);
            match &best {
                Some((_, b, _)) if v >= *b => {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((step, v, model.params().snapshot()));
                    stale = 0;
                }
            }
        }
    }
    let (best_step, best_val_loss, snap) = best.expect("at least one evaluation");
    model.params_mut().restore(&snap)?;
    Ok(TrainReport {
        evals,
        best_step,
        best_val_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn series_tensor(ds: &Dataset) -> Result<Tensor> {
    Tensor::from_series(&ds.values())
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    t.select(idx)
}

/// Mean over chunks of a per-batch mean loss, weighted by chunk size.
fn chunked_mean(n: usize, chunk: usize, mut f: impl FnMut(&[usize]) -> Result<f64>) -> Result<f64> {
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for c in idx.chunks(chunk.max(1)) {
        total += f(c)? * c.len() as f64;
    }
    Ok(total / n as f64)
}

/// `k` stacked copies of the whole batch.
fn repeat_rows(t: &Tensor, k: usize) -> Tensor {
    let idx: Vec<usize> = (0..k).flat_map(|_| 0..t.batch()).collect();
    t.select(&idx)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    d / a.len() as f64
}

/// Attribute targets standardised with a standardizer fitted on `train`.
pub fn attribute_targets(ds: &Dataset, std: &AttributeStandardizer) -> Result<Tensor> {
    let raw = extract_batch(&ds.values())?;
    let rows = raw.iter().map(|r| std.apply(r)).collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Random input transforms for attribute regression. Targets are re-extracted
/// from each transformed series, so any transform keeps them exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputJitter {
    /// Random circular shift of the series.
    pub roll: bool,
    /// Multiplicative amplitude range.
    pub scale: (f64, f64),
    /// Std of additive Gaussian noise.
    pub noise_std: f64,
}

impl Default for InputJitter {
    fn default() -> Self {
        Self {
            roll: true,
            scale: (0.8, 1.25),
            noise_std: 0.05,
        }
    }
}

impl InputJitter {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("invalid input jitter {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = x.len();
        let shift = if self.roll && n > 0 { rng.random_range(0..n) } else { 0 };
        let (lo, hi) = self.scale;
        let k = rng.random_range(lo..=hi);
        (0..n)
            .map(|i| k * x[(i + shift) % n] + self.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Transformed copies of rows `idx` of `x`, keeping the input layout.
    pub fn batch(&self, x: &Tensor, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let data = idx.iter().flat_map(|&i| self.apply(x.item(i), rng)).collect();
        Tensor::new(shape, data)
    }
}

/// Fits the attribute standardizer on `train` and regresses the standardised
/// attribute vector from the series.
pub fn train_attribute_predictor(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    hidden: Option<Vec<usize>>,
) -> Result<(AttributePredictor, AttributeStandardizer, TrainReport)> {
    let len = train.series_len();
    let standardizer = AttributeStandardizer::fit(&extract_batch(&train.values())?)?;
    let ty = attribute_targets(train, &standardizer)?;
    let vy = attribute_targets(val, &standardizer)?;
    let tx = Tensor::from_rows(&train.values())?;
    let vx = Tensor::from_rows(&val.values())?;
    let mut acfg = AttrPredictorConfig::new(len);
    if let Some(h) = hidden {
        acfg.hidden = h;
    }
    let mut model = AttributePredictor::new(acfg, cfg.seed);
    let report = fit(
        &mut model,
        cfg,
        train.len(),
        &mut |m: &AttributePredictor, g: &mut Graph, idx: &[usize], rng: &mut ChaCha8Rng| {
            let (x, y) = match &cfg.input_jitter {
                None => (rows(&tx, idx), rows(&ty, idx)),
                Some(j) => {
                    let x = j.batch(&tx, idx, rng)?;
                    let ys = extract_batch(&(0..idx.len()).map(|i| x.item(i)).collect::<Vec<_>>())?
                        .iter()
                        .map(|r| standardizer.apply(r))
                        .collect::<Result<Vec<_>>>()?;
                    (x, Tensor::from_rows(&ys)?)
                }
            };
            let x = g.input(x);
            let y = g.input(y);
            let p = m.forward(g, x)?;
            g.mse(p, y)
        },
        &mut |m: &AttributePredictor| Ok(mse(&m.predict(&vx)?, &vy)),
    )?;
    Ok((model, standardizer, report))
}

fn predicted_attrs(model: Option<&AttributePredictor>, x: &Tensor, conditional: bool) -> Result<Option<Tensor>> {
    match (conditional, model) {
        (false, _) => Ok(None),
        (true, Some(m)) => m.predict(x).map(Some),
        (true, None) => Err(Error::Config("conditional denoiser needs an attribute predictor".into())),
    }
}

/// Clean training batch and its attributes. Under input jitter the
/// attributes are re-predicted from the transformed series.
fn denoiser_batch(
    tx: &Tensor,
    ta: Option<&Tensor>,
    attr_model: Option<&AttributePredictor>,
    cfg: &TrainConfig,
    idx: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<Tensor>)> {
    match &cfg.input_jitter {
        None => Ok((rows(tx, idx), ta.map(|a| rows(a, idx)))),
        Some(j) => {
            let clean = j.batch(tx, idx, rng)?;
            let a = predicted_attrs(attr_model, &clean, ta.is_some())?;
            Ok((clean, a))
        }
    }
}

/// Autoencoder training: each batch gets one noise rate drawn uniformly from
/// `noise_rate_range` and the model reconstructs the clean batch. Validation
/// uses `val_draws` fixed draws of rate and noise per sample.
pub fn train_dae(
    train: &Dataset,
    val: &Dataset,
    attr_model: Option<&AttributePredictor>,
    cfg: &TrainConfig,
    dcfg: DenoiserConfig,
) -> Result<(Denoiser, TrainReport)> {
    if dcfg.mode != DenoiserMode::Dae {
        return Err(Error::Config("train_dae needs an autoencoder config".into()));
    }
    let conditional = dcfg.conditional;
    let tx = series_tensor(train)?;
    let vx = repeat_rows(&series_tensor(val)?, cfg.val_draws);
    let ta = predicted_attrs(attr_model, &tx, conditional)?;
    let va = predicted_attrs(attr_model, &vx, conditional)?;
    let (lo, hi) = cfg.noise_rate_range;
    let len = vx.len() / vx.batch().max(1);
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed);
    vrng.set_stream(2);
    let mut vnoisy = vx.clone();
    for j in 0..vx.batch() {
        let r = vrng.random_range(lo..=hi);
        let eps = normal(&mut vrng, len);
        for (v, e) in vnoisy.item_mut(j).iter_mut().zip(eps) {
            *v += r * e;
        }
    }
    let mut model = Denoiser::new(dcfg, cfg.seed)?;
    let bs = cfg.batch_size;
    let report = fit(
        &mut model,
        cfg,
        train.len(),
        &mut |m: &Denoiser, g: &mut Graph, idx: &[usize], rng: &mut ChaCha8Rng| {
            let (clean, a) = denoiser_batch(&tx, ta.as_ref(), attr_model, cfg, idx, rng)?;
            let r = rng.random_range(lo..=hi);
            let eps = normal(rng, clean.len());
            let mut noisy = clean.clone();
            for (v, e) in noisy.data_mut().iter_mut().zip(eps) {
                *v += r * e;
            }
            let xi = g.input(noisy);
            let y = m.forward(g, xi, &vec![0; idx.len()], a.as_ref())?;
            let target = g.input(clean);
            g.mse(y, target)
        },
        &mut |m: &Denoiser| {
            chunked_mean(vx.batch(), bs, |c| {
                let a = va.as_ref().map(|a| rows(a, c));
                let out = m.denoise_step(&rows(&vnoisy, c), 0, a.as_ref())?;
                Ok(mse(&out, &rows(&vx, c)))
            })
        },
    )?;
    Ok((model, report))
}

/// Diffusion training: uniform timesteps, unit-Gaussian noise, and an MSE
/// between the true and predicted noise. Validation fixes `(t, eps)` per
/// sample, `val_draws` times.
pub fn train_dpm(
    train: &Dataset,
    val: &Dataset,
    attr_model: Option<&AttributePredictor>,
    cfg: &TrainConfig,
    dcfg: DenoiserConfig,
) -> Result<(Denoiser, TrainReport)> {
    if dcfg.mode != DenoiserMode::Dpm {
        return Err(Error::Config("train_dpm needs a diffusion config".into()));
    }
    let sched = cfg.schedule.build()?;
    let steps = sched.steps();
    let conditional = dcfg.conditional;
    let tx = series_tensor(train)?;
    let vx = repeat_rows(&series_tensor(val)?, cfg.val_draws);
    let ta = predicted_attrs(attr_model, &tx, conditional)?;
    let va = predicted_attrs(attr_model, &vx, conditional)?;
    let len = vx.len() / vx.batch().max(1);

    let diffuse = |clean: &Tensor, ts: &[usize], eps: &Tensor| -> Result<Tensor> {
        let mut out = clean.clone();
        for (j, &t) in ts.iter().enumerate() {
            let xt = sched.q_sample(clean.item(j), t, eps.item(j))?;
            out.item_mut(j).copy_from_slice(&xt);
        }
        Ok(out)
    };

    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed);
    vrng.set_stream(3);
    let vts: Vec<usize> = (0..vx.batch()).map(|_| vrng.random_range(1..=steps)).collect();
    let veps = Tensor::new(vx.shape().to_vec(), normal(&mut vrng, vx.len()))?;
    let vxt = diffuse(&vx, &vts, &veps)?;
    debug_assert_eq!(vxt.len(), vx.batch() * len);

    let mut model = Denoiser::new(dcfg, cfg.seed)?;
    let bs = cfg.batch_size;
    let report = fit(
        &mut model,
        cfg,
        train.len(),
        &mut |m: &Denoiser, g: &mut Graph, idx: &[usize], rng: &mut ChaCha8Rng| {
            let (clean, a) = denoiser_batch(&tx, ta.as_ref(), attr_model, cfg, idx, rng)?;
            let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=steps)).collect();
            let eps = Tensor::new(clean.shape().to_vec(), normal(rng, clean.len()))?;
            let xt = diffuse(&clean, &ts, &eps)?;
            let xi = g.input(xt);
            let y = m.forward(g, xi, &ts, a.as_ref())?;
            let target = g.input(eps);
            g.mse(y, target)
        },
        &mut |m: &Denoiser| {
            chunked_mean(vx.batch(), bs, |c| {
                let a = va.as_ref().map(|a| rows(a, c));
                let ts: Vec<usize> = c.iter().map(|&i| vts[i]).collect();
                let mut g = Graph::new();
                let xi = g.input(rows(&vxt, c));
                let y = m.forward(&mut g, xi, &ts, a.as_ref())?;
                Ok(mse(g.value(y), &rows(&veps, c)))
            })
        },
    )?;
    Ok((model, report))
}

/// Options for downstream training beyond the shared loop settings.
#[derive(Debug, Clone, Default)]
pub struct DownstreamOptions {
    /// Overrides the default architecture.
    pub model: Option<DownstreamConfig>,
    /// Seed of the augmentation randomness.
    pub augment_seed: u64,
    /// Build an `n`-fold synthetic training set once instead of replacing
    /// every batch on the fly.
    pub eager_expansion: Option<usize>,
}

/// Downstream training on synthetic data. For a non-raw augmenter every
/// batch is replaced by a fresh synthetic version; validation always sees
/// raw samples.
pub fn train_downstream(
    train: &Dataset,
    val: &Dataset,
    augmenter: &Augmenter<'_>,
    cfg: &TrainConfig,
    opts: &DownstreamOptions,
) -> Result<(DownstreamModel, TrainReport)> {
    train_downstream_observed(train, val, augmenter, cfg, opts, &mut |_, _| {})
}

/// [`train_downstream`] with a callback receiving every training batch as
/// fed to the model.
pub fn train_downstream_observed(
    train: &Dataset,
    val: &Dataset,
    augmenter: &Augmenter<'_>,
    cfg: &TrainConfig,
    opts: &DownstreamOptions,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<(DownstreamModel, TrainReport)> {
    let mcfg = opts
        .model
        .clone()
        .unwrap_or_else(|| DownstreamConfig::new(train.series_len(), train.task));
    let mut model = DownstreamModel::new(mcfg, cfg.seed)?;
    let raw_x = series_tensor(train)?;
    let raw_y: Vec<f64> = train.targets().iter().map(|t| t.as_f64()).collect();
    let (tx, ty, on_the_fly) = match opts.eager_expansion {
        Some(n) if n >= 1 && !augmenter.is_raw() => {
            let x = augmenter.expand(&raw_x, n, opts.augment_seed)?;
            let y = raw_y.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
            (x, y, false)
        }
        _ => (raw_x, raw_y, !augmenter.is_raw()),
    };
    let vx = series_tensor(val)?;
    let vy: Vec<f64> = val.targets().iter().map(|t| t.as_f64()).collect();
    // separate stream so a raw run draws exactly what a plain loop would
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.augment_seed);
    let mut step = 0;
    let bs = cfg.batch_size;
    let report = fit(
        &mut model,
        cfg,
        tx.batch(),
        &mut |m: &DownstreamModel, g: &mut Graph, idx: &[usize], _: &mut ChaCha8Rng| {
            step += 1;
            let mut x = rows(&tx, idx);
            if on_the_fly {
                x = augmenter.augment_batch(&x, aug_rng.next_u64())?;
            }
            observer(step, &x);
            let y: Vec<f64> = idx.iter().map(|&i| ty[i]).collect();
            let xi = g.input(x);
            m.loss(g, xi, &y)
        },
        &mut |m: &DownstreamModel| evaluate(m, &vx, &vy, bs),
    )?;
    Ok((model, report))
}

/// Mean task loss on raw samples, evaluated in chunks.
pub fn evaluate(model: &DownstreamModel, x: &Tensor, targets: &[f64], chunk: usize) -> Result<f64> {
    chunked_mean(x.batch(), chunk, |c| {
        let y: Vec<f64> = c.iter().map(|&i| targets[i]).collect();
        model.evaluate_loss(&rows(x, c), &y)
    })
}

/// [`evaluate`] on a dataset.
pub fn evaluate_dataset(model: &DownstreamModel, ds: &Dataset) -> Result<f64> {
    let y: Vec<f64> = ds.targets().iter().map(|t| t.as_f64()).collect();
    evaluate(model, &series_tensor(ds)?, &y, 64)
}
