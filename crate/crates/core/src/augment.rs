//! Augmentation-time machinery: the noise mapping, repeated autoencoder
//! denoising and the coarse diffusion reverse trajectory.
//!
//! A noise rate `r` is bridged to a diffusion timestep `t*` by matching the
//! noise-to-signal amplitude of `x + r * eps` with `sqrt((1 - a_t) / a_t)`.
//! The noisy series is rescaled by `sqrt(a_t*)`, then `[0, t*]` is walked in
//! `steps` coarse jumps: predict the clean series, and if the walk is not
//! finished re-noise it to the next timestep with fresh noise.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseRate, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{AttributePredictor, Denoiser, DenoiserMode};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    Raw,
    Noise,
    Dae,
    Dpm,
}

impl AugmentMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentMethod::Raw => "raw",
            AugmentMethod::Noise => "noise",
            AugmentMethod::Dae => "dae",
            AugmentMethod::Dpm => "dpm",
        }
    }

    /// Whether the method runs a denoiser (and so has a steps dimension).
    pub fn denoises(&self) -> bool {
        matches!(self, AugmentMethod::Dae | AugmentMethod::Dpm)
    }
}

/// Serialisable description of one augmentation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmenterSpec {
    pub method: AugmentMethod,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default)]
    pub conditional: bool,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl AugmenterSpec {
    pub fn raw() -> Self {
        Self {
            method: AugmentMethod::Raw,
            noise_rate: 0.0,
            steps: 1,
            conditional: false,
            checkpoint: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method != AugmentMethod::Raw && !(self.noise_rate > 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::Config(format!(
                "{} augmentation needs a positive noise rate, got {}",
                self.method.as_str(),
                self.noise_rate
            )));
        }
        if self.method.denoises() && !(1..=3).contains(&self.steps) {
            return Err(Error::Config(format!(
                "denoising steps must be 1, 2 or 3, got {}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Anything that estimates the noise in a diffused batch.
pub trait NoisePredictor {
    fn is_conditional(&self) -> bool;
    fn predict_noise(&self, x_t: &Tensor, t: usize, attrs: Option<&Tensor>) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn is_conditional(&self) -> bool {
        self.config.conditional
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, attrs: Option<&Tensor>) -> Result<Tensor> {
        if self.config.mode != DenoiserMode::Dpm {
            return Err(Error::Config("autoencoder used as a noise predictor".into()));
        }
        self.denoise_step(x_t, t, attrs)
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `x + r * eps` with fresh unit-Gaussian `eps`.
pub fn add_noise<R: Rng + ?Sized>(x: &[f64], r: NoiseRate, rng: &mut R) -> Vec<f64> {
    if r.get() == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| v + r.get() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Applies the autoencoder `steps` times.
pub fn dae_denoise(x_noisy: &Tensor, steps: usize, denoiser: &Denoiser, attrs: Option<&Tensor>) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("dae_denoise needs at least one step".into()));
    }
    if denoiser.config.mode != DenoiserMode::Dae {
        return Err(Error::Config("diffusion model used as an autoencoder".into()));
    }
    let mut x = x_noisy.clone();
    for _ in 0..steps {
        x = denoiser.denoise_step(&x, 0, attrs)?;
    }
    Ok(x)
}

/// Timesteps visited by a coarse reverse walk of `steps` jumps from `t_star`.
/// Intermediate stops never drop below 1, so every jump but the last
/// re-noises.
pub fn reverse_timesteps(t_star: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|i| {
            if i == 0 {
                t_star
            } else {
                (t_star * (steps - i) / steps).max(1)
            }
        })
        .collect()
}

/// Coarse diffusion denoising of a `(batch, 1, L)` batch. `rngs` holds one
/// stream per batch item and supplies the `steps - 1` re-noising draws.
pub fn dpm_denoise<P: NoisePredictor, R: Rng>(
    x_noisy: &Tensor,
    rate: NoiseRate,
    steps: usize,
    model: &P,
    schedule: &NoiseSchedule,
    attrs: Option<&Tensor>,
    rngs: &mut [R],
) -> Result<Tensor> {
    if !(1..=3).contains(&steps) {
        return Err(Error::Config(format!("denoising steps must be 1, 2 or 3, got {steps}")));
    }
    if model.is_conditional() && attrs.is_none() {
        return Err(Error::Config("conditional denoiser called without attributes".into()));
    }
    let b = x_noisy.batch();
    if rngs.len() != b {
        return Err(Error::shape("dpm_denoise", format!("{} rng streams for batch of {b}", rngs.len())));
    }
    let t_star = schedule.timestep_for_noise_rate(rate);
    let ts = reverse_timesteps(t_star, steps);
    let scale = schedule.alpha_bar(t_star)?.sqrt();
    let mut x_t = x_noisy.map(|v| v * scale);
    for (i, &t) in ts.iter().enumerate() {
        let eps_hat = model.predict_noise(&x_t, t, attrs)?;
        let mut x0 = Tensor::zeros(x_t.shape());
        for j in 0..b {
            let rec = schedule.predict_x0(x_t.item(j), eps_hat.item(j), t)?;
            x0.item_mut(j).copy_from_slice(&rec);
        }
        match ts.get(i + 1) {
            None => return Ok(x0),
            Some(&next) => {
                for (j, rng) in rngs.iter_mut().enumerate() {
                    let eps = normal_vec(rng, x0.item(j).len());
                    let renoised = schedule.q_sample(x0.item(j), next, &eps)?;
                    x_t.item_mut(j).copy_from_slice(&renoised);
                }
            }
        }
    }
    unreachable!("steps >= 1")
}

/// Random stream for batch item `index` of an augmentation call.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// A ready-to-use augmentation strategy with its models resolved.
#[derive(Debug, Clone)]
pub enum Augmenter<'a> {
    Raw,
    Noise {
        rate: NoiseRate,
    },
    Dae {
        rate: NoiseRate,
        steps: usize,
        denoiser: &'a Denoiser,
        attr_model: Option<&'a AttributePredictor>,
    },
    Dpm {
        rate: NoiseRate,
        steps: usize,
        denoiser: &'a Denoiser,
        attr_model: Option<&'a AttributePredictor>,
        schedule: NoiseSchedule,
    },
}

impl<'a> Augmenter<'a> {
    /// Resolves a spec against loaded models. Denoising methods need a
    /// denoiser of the matching mode; conditional ones also need the
    /// attribute predictor.
    pub fn from_spec(
        spec: &AugmenterSpec,
        denoiser: Option<&'a Denoiser>,
        attr_model: Option<&'a AttributePredictor>,
        schedule: Option<&NoiseSchedule>,
    ) -> Result<Self> {
        spec.validate()?;
        let rate = NoiseRate::new(spec.noise_rate)?;
        let need_denoiser = |mode: DenoiserMode| -> Result<&'a Denoiser> {
            let d = denoiser.ok_or_else(|| match &spec.checkpoint {
                Some(p) => Error::MissingFile(p.clone()),
                None => Error::Config(format!("{} augmentation needs a denoiser checkpoint", spec.method.as_str())),
            })?;
            if d.config.mode != mode {
                return Err(Error::Config(format!("denoiser mode {:?} does not match {:?}", d.config.mode, mode)));
            }
            if d.config.conditional != spec.conditional {
                return Err(Error::Config("denoiser conditioning does not match the augmenter".into()));
            }
            if spec.conditional && attr_model.is_none() {
                return Err(Error::Config("conditional augmentation needs the attribute predictor".into()));
            }
            Ok(d)
        };
        let attr_model = if spec.conditional { attr_model } else { None };
        Ok(match spec.method {
            AugmentMethod::Raw => Augmenter::Raw,
            AugmentMethod::Noise => Augmenter::Noise { rate },
            AugmentMethod::Dae => Augmenter::Dae {
                rate,
                steps: spec.steps,
                denoiser: need_denoiser(DenoiserMode::Dae)?,
                attr_model,
            },
            AugmentMethod::Dpm => Augmenter::Dpm {
                rate,
                steps: spec.steps,
                denoiser: need_denoiser(DenoiserMode::Dpm)?,
                attr_model,
                schedule: schedule
                    .cloned()
                    .ok_or_else(|| Error::Config("diffusion augmentation needs a schedule".into()))?,
            },
        })
    }

    pub fn is_raw(&self) -> bool {
        matches!(self, Augmenter::Raw)
    }

    /// Synthetic version of a `(batch, 1, L)` batch. Targets are untouched
    /// by construction; randomness comes from per-item streams of `seed`.
    pub fn augment_batch(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let (rate, attr_model) = match self {
            Augmenter::Raw => return Ok(x.clone()),
            Augmenter::Noise { rate } => (*rate, None),
            Augmenter::Dae { rate, attr_model, .. } | Augmenter::Dpm { rate, attr_model, .. } => {
                (*rate, *attr_model)
            }
        };
        let b = x.batch();
        let mut rngs: Vec<ChaCha8Rng> = (0..b).map(|i| sample_rng(seed, i)).collect();
        let mut noisy = Tensor::zeros(x.shape());
        for (j, rng) in rngs.iter_mut().enumerate() {
            let v = add_noise(x.item(j), rate, rng);
            noisy.item_mut(j).copy_from_slice(&v);
        }
        // attributes always come from the raw batch
        let attrs = attr_model.map(|m| m.predict(x)).transpose()?;
        match self {
            Augmenter::Raw | Augmenter::Noise { .. } => Ok(noisy),
            Augmenter::Dae { steps, denoiser, .. } => dae_denoise(&noisy, *steps, denoiser, attrs.as_ref()),
            Augmenter::Dpm {
                steps,
                denoiser,
                schedule,
                ..
            } => dpm_denoise(&noisy, rate, *steps, *denoiser, schedule, attrs.as_ref(), &mut rngs),
        }
    }

    /// `n` synthetic copies of every item, item-major.
    pub fn expand(&self, x: &Tensor, n: usize, seed: u64) -> Result<Tensor> {
        let idx: Vec<usize> = (0..x.batch()).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        self.augment_batch(&x.select(&idx), seed)
    }
}
