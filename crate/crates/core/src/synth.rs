//! Built-in three-class waveform dataset: sine, square and sawtooth.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Target, Task, TimeSeriesSample};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["sine", "square", "sawtooth"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub len: usize,
    pub amplitude: (f64, f64),
    pub noise_std: f64,
    /// Range of full periods per series.
    pub cycles: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            len: 128,
            amplitude: (0.8, 1.2),
            noise_std: 0.1,
            cycles: (2.0, 5.0),
        }
    }
}

fn wave(class: usize, phase: f64) -> f64 {
    let u = phase.rem_euclid(1.0);
    match class {
        0 => (TAU * u).sin(),
        1 => {
            if u < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        _ => 2.0 * u - 1.0,
    }
}

/// `n` samples, class `i % 3` for sample `i`, so `n = 90` gives 30 per class.
pub fn generate(n: usize, spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let (a_lo, a_hi) = spec.amplitude;
    let (c_lo, c_hi) = spec.cycles;
    if spec.len == 0 || !(0.0 < a_lo && a_lo <= a_hi) || !(0.0 < c_lo && c_lo <= c_hi) {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::Config(format!("noise_std {}: {e}", spec.noise_std)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let class = i % 3;
            let amp = rng.random_range(a_lo..=a_hi);
            let cycles = rng.random_range(c_lo..=c_hi);
            let phase: f64 = rng.random();
            let values = (0..spec.len)
                .map(|k| amp * wave(class, phase + cycles * k as f64 / spec.len as f64) + noise.sample(&mut rng))
                .collect();
            TimeSeriesSample {
                id: format!("{}-{i}", CLASS_NAMES[class]),
                values,
                target: Target::Class(class),
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        task: Task::Classification { n_classes: 3 },
        class_labels: vec![0, 1, 2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let ds = generate(90, &SynthSpec::default(), 3).unwrap();
        assert_eq!(ds.len(), 90);
        assert_eq!(ds.series_len(), 128);
        for c in 0..3 {
            assert_eq!(ds.samples.iter().filter(|s| s.target == Target::Class(c)).count(), 30);
        }
        assert_eq!(ds, generate(90, &SynthSpec::default(), 3).unwrap());
        assert_ne!(ds, generate(90, &SynthSpec::default(), 4).unwrap());
    }

    #[test]
    fn noiseless_waves_stay_within_amplitude() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let ds = generate(30, &spec, 1).unwrap();
        for s in &ds.samples {
            assert!(s.values.iter().all(|v| v.abs() <= 1.2 + 1e-12));
        }
    }

    #[test]
    fn waveform_shapes() {
        assert!((wave(0, 0.25) - 1.0).abs() < 1e-12);
        assert_eq!(wave(1, 0.2), 1.0);
        assert_eq!(wave(1, 0.7), -1.0);
        assert!((wave(2, 0.75) - 0.5).abs() < 1e-12);
        assert!((wave(2, 1.75) - 0.5).abs() < 1e-12);
    }
}
