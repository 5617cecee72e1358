//! Per-segment meta-attributes used to condition the denoisers.
//!
//! Each 32-point segment yields fifteen statistics in a fixed order (see
//! [`ATTRIBUTE_NAMES`]); a series of length `L` yields `15 * L / 32` values,
//! segment-major. Ratios with a vanishing denominator (`|mean|` or std below
//! `1e-12`) are reported as 0.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::SEGMENT_LEN;
use crate::error::{Error, Result};

pub const N_ATTRIBUTES: usize = 15;

pub const ATTRIBUTE_NAMES: [&str; N_ATTRIBUTES] = [
    "stability",
    "periodicity",
    "oscillation",
    "complexity",
    "noise",
    "entropy",
    "variability",
    "std",
    "peculiarity",
    "dynamic_range",
    "symmetry",
    "peaks",
    "slope",
    "min",
    "max",
];

const DEGENERATE: f64 = 1e-12;
const ENTROPY_BINS: usize = 10;
const CWT_WIDTHS: usize = 10;
const RIDGE_GAP: usize = 2;
const MIN_SNR: f64 = 1.0;
const NOISE_PERCENTILE: f64 = 10.0;

/// Exactly one 32-point window of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment<'a>(&'a [f64]);

impl<'a> Segment<'a> {
    pub fn new(values: &'a [f64]) -> Result<Self> {
        if values.len() != SEGMENT_LEN {
            return Err(Error::shape(
                "segment",
                format!("expected {SEGMENT_LEN} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("segment contains non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &'a [f64] {
        self.0
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::shape("pearson", "need at least two points"));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Entropy in nats of a 10-bin equal-width histogram over `[min, max]`.
pub fn shannon_entropy(x: &[f64]) -> f64 {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo || hi.is_nan() {
        return 0.0;
    }
    let mut counts = [0usize; ENTROPY_BINS];
    let scale = ENTROPY_BINS as f64 / (hi - lo);
    for v in x {
        let bin = (((v - lo) * scale) as usize).min(ENTROPY_BINS - 1);
        counts[bin] += 1;
    }
    let n = x.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Central moments m2, m3, m4 with 1/n normalisation.
fn central_moments(x: &[f64]) -> (f64, f64, f64) {
    let m = mean(x);
    let n = x.len() as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (m2 / n, m3 / n, m4 / n)
}

/// Adjusted Fisher-Pearson skewness G1.
pub fn g1_skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (m2, m3, _) = central_moments(x);
    if n < 3.0 || m2.sqrt() < DEGENERATE {
        return 0.0;
    }
    (n * (n - 1.0)).sqrt() / (n - 2.0) * m3 / m2.powf(1.5)
}

/// Adjusted excess kurtosis G2.
pub fn g2_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (m2, _, m4) = central_moments(x);
    if n < 4.0 || m2.sqrt() < DEGENERATE {
        return 0.0;
    }
    (n - 1.0) / ((n - 2.0) * (n - 3.0)) * ((n + 1.0) * (m4 / (m2 * m2) - 3.0) + 6.0)
}

/// Least-squares slope of `x` against its index.
pub fn linreg_slope(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let ti = (n - 1.0) / 2.0;
    let mx = mean(x);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - ti;
        num += dt * (v - mx);
        den += dt * dt;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Sum of DFT magnitudes over all frequencies.
pub fn fourier_complexity(x: &[f64]) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.iter().map(|c| c.norm()).sum()
}

/// Mexican-hat wavelet sampled on `points` points with width `a`.
pub fn ricker(points: usize, a: f64) -> Vec<f64> {
    let amp = 2.0 / ((3.0 * a).sqrt() * std::f64::consts::PI.powf(0.25));
    let centre = (points as f64 - 1.0) / 2.0;
    (0..points)
        .map(|i| {
            let t = i as f64 - centre;
            let q = t * t / (a * a);
            amp * (1.0 - q) * (-q / 2.0).exp()
        })
        .collect()
}

/// Continuous wavelet transform, one row per width, "same"-mode convolution.
pub fn cwt(x: &[f64], widths: &[usize]) -> Vec<Vec<f64>> {
    let n = x.len();
    widths
        .iter()
        .map(|&w| {
            let m = (10 * w).min(n);
            let kernel = ricker(m, w as f64);
            let start = (m - 1) / 2;
            (0..n)
                .map(|out| {
                    let k = out + start;
                    let mut acc = 0.0;
                    for (j, xv) in x.iter().enumerate() {
                        if k >= j && k - j < m {
                            acc += xv * kernel[k - j];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn strict_maxima(row: &[f64]) -> Vec<usize> {
    (1..row.len().saturating_sub(1))
        .filter(|&i| row[i] > row[i - 1] && row[i] > row[i + 1])
        .collect()
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

struct Ridge {
    rows: Vec<usize>,
    cols: Vec<usize>,
    gap: usize,
}

/// Number of CWT ridge lines (ricker, widths 1..=10) long enough and with
/// enough signal over the noise floor.
pub fn count_cwt_peaks(x: &[f64]) -> usize {
    if std_dev(x) < DEGENERATE {
        return 0;
    }
    // centred so a constant offset cannot leak through truncated kernels
    let mu = mean(x);
    let centred: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let widths: Vec<usize> = (1..=CWT_WIDTHS).collect();
    let m = cwt(&centred, &widths);
    let n_rows = m.len();
    let mut live: Vec<Ridge> = strict_maxima(&m[n_rows - 1])
        .into_iter()
        .map(|c| Ridge {
            rows: vec![n_rows - 1],
            cols: vec![c],
            gap: 0,
        })
        .collect();
    let mut done = Vec::new();
    for row in (0..n_rows - 1).rev() {
        let max_dist = widths[row] as f64 / 4.0;
        live.iter_mut().for_each(|r| r.gap += 1);
        let prev: Vec<usize> = live.iter().map(|r| *r.cols.last().expect("non-empty")).collect();
        for col in strict_maxima(&m[row]) {
            let closest = prev
                .iter()
                .enumerate()
                .min_by_key(|(_, &p)| p.abs_diff(col))
                .filter(|(_, &p)| p.abs_diff(col) as f64 <= max_dist)
                .map(|(i, _)| i);
            match closest {
                Some(i) => {
                    let r = &mut live[i];
                    r.rows.push(row);
                    r.cols.push(col);
                    r.gap = 0;
                }
                None => live.push(Ridge {
                    rows: vec![row],
                    cols: vec![col],
                    gap: 0,
                }),
            }
        }
        let (stale, keep): (Vec<_>, Vec<_>) = live.into_iter().partition(|r| r.gap > RIDGE_GAP);
        done.extend(stale);
        live = keep;
    }
    done.extend(live);

    let mut base: Vec<f64> = m[0].iter().map(|v| v.abs()).collect();
    let noise = percentile(&mut base, NOISE_PERCENTILE);
    let min_len = CWT_WIDTHS.div_ceil(4);
    done.iter()
        .filter(|r| r.rows.len() >= min_len)
        .filter(|r| {
            let (row, col) = (*r.rows.last().expect("non-empty"), *r.cols.last().expect("non-empty"));
            let signal = m[row][col].abs();
            if noise > 0.0 {
                signal / noise >= MIN_SNR
            } else {
                signal > 0.0
            }
        })
        .count()
}

fn safe_ratio(num: f64, den: f64) -> f64 {
    if den.abs() < DEGENERATE {
        0.0
    } else {
        num / den
    }
}

/// The fifteen attributes of one segment, in [`ATTRIBUTE_NAMES`] order.
pub fn extract_segment_attributes(seg: Segment<'_>) -> [f64; N_ATTRIBUTES] {
    let x = seg.values();
    let index: Vec<f64> = (0..x.len()).map(|i| i as f64).collect();
    let stability = pearson(x, &index).expect("equal lengths").powi(2);

    let q = x.len() / 4;
    let parts: Vec<&[f64]> = x.chunks(q).collect();
    let mut corr = 0.0;
    let mut pairs = 0;
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            corr += pearson(parts[i], parts[j]).expect("equal lengths");
            pairs += 1;
        }
    }
    let periodicity = corr / pairs as f64;

    let m = mean(x);
    let sd = std_dev(x);
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [
        stability,
        periodicity,
        safe_ratio(sd, m).abs(),
        fourier_complexity(x),
        safe_ratio(m, sd),
        shannon_entropy(x),
        safe_ratio(sd, m),
        sd,
        g2_kurtosis(x),
        (hi - lo).abs(),
        g1_skewness(x),
        count_cwt_peaks(x) as f64,
        linreg_slope(x),
        lo,
        hi,
    ]
}

/// Raw (unstandardised) attribute vector of a whole series.
pub fn extract_meta_attributes(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() || !values.len().is_multiple_of(SEGMENT_LEN) {
        return Err(Error::Config(format!(
            "series length {} is not a positive multiple of {SEGMENT_LEN}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(values.len() / SEGMENT_LEN * N_ATTRIBUTES);
    for chunk in values.chunks(SEGMENT_LEN) {
        out.extend_from_slice(&extract_segment_attributes(Segment::new(chunk)?));
    }
    Ok(out)
}

/// Extracts attributes for many series in parallel; output order matches
/// input order.
pub fn extract_batch(series: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    series.par_iter().map(|s| extract_meta_attributes(s)).collect()
}

/// Length of the attribute vector for a series of length `len`.
pub fn attribute_len(len: usize) -> usize {
    len / SEGMENT_LEN * N_ATTRIBUTES
}

/// Column names `a_0 ... a_{n-1}` paired with their attribute meaning.
pub fn attribute_labels(len: usize) -> Vec<String> {
    (0..attribute_len(len))
        .map(|i| format!("seg{}_{}", i / N_ATTRIBUTES, ATTRIBUTE_NAMES[i % N_ATTRIBUTES]))
        .collect()
}

/// Per-attribute z-score fitted on training vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub names: Vec<String>,
    pub periodicity_pairs: String,
    pub stability_partner: String,
    /// Standardized values are clamped to `[-clip, clip]`.
    #[serde(default = "default_clip")]
    pub clip: f64,
}

/// Ratio attributes (Oscillation, Noise, Variability) explode when a segment mean is near 0.
pub const DEFAULT_CLIP: f64 = 5.0;

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

impl AttributeStandardizer {
    pub fn fit(train: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = train.first() else {
            return Err(Error::Data("cannot fit attribute standardizer on no samples".into()));
        };
        let dim = first.len();
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in train {
            if row.len() != dim {
                return Err(Error::shape("attribute standardizer", "ragged attribute rows"));
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in train {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > DEGENERATE { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self {
            mean,
            std,
            names: attribute_labels(dim / N_ATTRIBUTES * SEGMENT_LEN),
            periodicity_pairs: "all 6 pairs of the four 8-point sub-segments".into(),
            stability_partner: "time index".into(),
            clip: DEFAULT_CLIP,
        })
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.mean.len() {
            return Err(Error::shape(
                "attribute standardizer",
                format!("expected {} attributes, got {}", self.mean.len(), raw.len()),
            ));
        }
        Ok(raw
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| ((v - m) / s).clamp(-self.clip, self.clip))
            .collect())
    }
}
