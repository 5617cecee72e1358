//! Variance schedules and the closed-form forward/reverse diffusion algebra.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step, `t = T` the most.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialisable description of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_1: f64,
    #[serde(rename = "beta_T")]
    pub beta_last: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 100,
            beta_1: 1e-4,
            beta_last: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => linear_beta_schedule(self.steps, self.beta_1, self.beta_last),
        }
    }
}

/// Tables of `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t` (cumulative
/// product), stored at index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Amplitude of unit-Gaussian noise added by the augmentation mapping.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NoiseRate(f64);

impl NoiseRate {
    pub fn new(r: f64) -> Result<Self> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Config(format!("noise rate must be finite and >= 0, got {r}")));
        }
        Ok(Self(r))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Linearly spaced betas from `beta_1` to `beta_last`, both inclusive.
pub fn linear_beta_schedule(steps: usize, beta_1: f64, beta_last: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_last && beta_last < 1.0) {
        return Err(Error::Config(format!(
            "schedule bounds must satisfy 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_last}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_1
            } else {
                beta_1 + (beta_last - beta_1) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }

    /// Noise-to-signal amplitude `sqrt((1 - alpha_bar_t) / alpha_bar_t)`.
    pub fn noise_ratio(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(((1.0 - ab) / ab).sqrt())
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != eps.len() {
            return Err(Error::shape("q_sample", format!("x0 {} vs eps {}", x0.len(), eps.len())));
        }
        let ab = self.alpha_bar(t)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
    }

    /// Inverts `q_sample` given a noise estimate.
    pub fn predict_x0(&self, x_t: &[f64], eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        if x_t.len() != eps_hat.len() {
            return Err(Error::shape(
                "predict_x0",
                format!("x_t {} vs eps {}", x_t.len(), eps_hat.len()),
            ));
        }
        let ab = self.alpha_bar(t)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - n * e) / s).collect())
    }

    /// Timestep whose noise-to-signal amplitude is closest to `r`; ties go to
    /// the smaller step.
    pub fn timestep_for_noise_rate(&self, r: NoiseRate) -> usize {
        let mut best = 1;
        let mut best_d = f64::INFINITY;
        for t in 1..=self.steps() {
            let d = (self.noise_ratio(t).expect("in range") - r.get()).abs();
            if d < best_d {
                best_d = d;
                best = t;
            }
        }
        best
    }
}
