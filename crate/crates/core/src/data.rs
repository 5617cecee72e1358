//! Dataset ingestion, windowing, normalisation and splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of one meta-attribute segment; window lengths must be multiples.
pub const SEGMENT_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Value(_) => None,
        }
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Target::Class(c) => *c as f64,
            Target::Value(v) => *v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub id: String,
    pub values: Vec<f64>,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { n_classes: usize },
    Regression,
}

impl Task {
    /// Width of the model output head.
    pub fn outputs(&self) -> usize {
        match self {
            Task::Classification { n_classes } => *n_classes,
            Task::Regression => 1,
        }
    }
}

/// How targets are interpreted at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    /// Integer labels. Labels starting at 1 are treated as 1-based, labels
    /// starting at 0 as 0-based; anything else is mapped through the sorted
    /// set of distinct labels. `n_classes` overrides the inferred count.
    Classification { n_classes: Option<usize> },
    /// Real targets, optionally min-max scaled to `[0, 1]`.
    Regression { min_max: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    UcrTsv,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<TimeSeriesSample>,
    pub task: Task,
    /// Original label written for each class index (classification only).
    #[serde(default)]
    pub class_labels: Vec<i64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn series_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.values.len())
    }

    pub fn with_samples(&self, samples: Vec<TimeSeriesSample>) -> Dataset {
        Dataset {
            samples,
            task: self.task,
            class_labels: self.class_labels.clone(),
        }
    }

    pub fn values(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.values.as_slice()).collect()
    }

    pub fn targets(&self) -> Vec<Target> {
        self.samples.iter().map(|s| s.target).collect()
    }

    fn label_for(&self, t: &Target) -> String {
        match t {
            Target::Class(c) => self
                .class_labels
                .get(*c)
                .map_or_else(|| c.to_string(), |l| l.to_string()),
            Target::Value(v) => format!("{v:?}"),
        }
    }

    /// Writes the dataset in one of the ingestion formats.
    pub fn write(&self, path: &Path, format: Format) -> Result<()> {
        let mut out = String::new();
        let sep = match format {
            Format::UcrTsv => '\t',
            Format::Csv => ',',
        };
        if format == Format::Csv {
            out.push_str("target");
            for i in 0..self.series_len() {
                write!(out, ",v{i}").expect("string write");
            }
            out.push('\n');
        }
        for s in &self.samples {
            out.push_str(&self.label_for(&s.target));
            for v in &s.values {
                write!(out, "{sep}{v:?}").expect("string write");
            }
            out.push('\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        col: Some(col),
        msg: format!("non-numeric cell `{}`", cell.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            col: Some(col),
            msg: format!("non-finite value `{}`", cell.trim()),
        });
    }
    Ok(v)
}

/// Reads a dataset; series are returned raw (no truncation or scaling of
/// values) in file order.
pub fn load_dataset(path: &Path, format: Format, task: TaskSpec) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, format, task, &path.display().to_string())
}

pub fn parse_dataset(text: &str, format: Format, task: TaskSpec, source: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let sep = match format {
        Format::UcrTsv => '\t',
        Format::Csv => {
            // header row
            lines.next();
            ','
        }
    };
    let mut width = None;
    let mut raw_targets = Vec::new();
    let mut line_rows = Vec::new();
    let mut series = Vec::new();
    for (row, line) in lines {
        let cells: Vec<&str> = line.split(sep).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    row,
                    col: None,
                    msg: format!("expected {w} columns, found {}", cells.len()),
                })
            }
            _ => {}
        }
        if cells.len() < 2 {
            return Err(Error::Parse {
                row,
                col: None,
                msg: "row needs a target and at least one value".into(),
            });
        }
        raw_targets.push(parse_cell(cells[0], row, 0)?);
        line_rows.push(row);
        let values = cells[1..]
            .iter()
            .enumerate()
            .map(|(c, cell)| parse_cell(cell, row, c + 1))
            .collect::<Result<Vec<_>>>()?;
        series.push(values);
    }
    if series.is_empty() {
        return Err(Error::Data(format!("no samples in {source}")));
    }

    let (task, targets, class_labels) = match task {
        TaskSpec::Classification { n_classes } => {
            let mut labels = Vec::with_capacity(raw_targets.len());
            for (&row, t) in line_rows.iter().zip(&raw_targets) {
                if t.fract() != 0.0 {
                    return Err(Error::Parse {
                        row,
                        col: Some(0),
                        msg: format!("class label {t} is not an integer"),
                    });
                }
                labels.push(*t as i64);
            }
            let min = *labels.iter().min().expect("non-empty");
            let max = *labels.iter().max().expect("non-empty");
            let (index, class_labels): (Vec<usize>, Vec<i64>) = if min >= 0 {
                let base = if min >= 1 { 1 } else { 0 };
                let n = (max - base + 1) as usize;
                (
                    labels.iter().map(|l| (l - base) as usize).collect(),
                    (0..n as i64).map(|i| i + base).collect(),
                )
            } else {
                let distinct: Vec<i64> = {
                    let mut d = labels.clone();
                    d.sort_unstable();
                    d.dedup();
                    d
                };
                let lookup: BTreeMap<i64, usize> =
                    distinct.iter().enumerate().map(|(i, l)| (*l, i)).collect();
                (labels.iter().map(|l| lookup[l]).collect(), distinct)
            };
            let n = n_classes.unwrap_or(class_labels.len());
            if let Some(bad) = index.iter().find(|&&i| i >= n) {
                return Err(Error::Data(format!(
                    "class index {bad} outside the configured {n} classes"
                )));
            }
            let mut class_labels = class_labels;
            while class_labels.len() < n {
                let next = class_labels.last().map_or(0, |l| l + 1);
                class_labels.push(next);
            }
            (
                Task::Classification { n_classes: n },
                index.into_iter().map(Target::Class).collect::<Vec<_>>(),
                class_labels,
            )
        }
        TaskSpec::Regression { min_max } => {
            let mut vals = raw_targets.clone();
            if min_max {
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
                vals.iter_mut().for_each(|v| *v = (*v - lo) / span);
            }
            (
                Task::Regression,
                vals.into_iter().map(Target::Value).collect(),
                Vec::new(),
            )
        }
    };

    let samples = series
        .into_iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (values, target))| TimeSeriesSample {
            id: format!("s{i}"),
            values,
            target,
        })
        .collect();
    Ok(Dataset {
        samples,
        task,
        class_labels,
    })
}

/// Keeps the first `len` points, or right-pads with the last value.
pub fn fit_window(sample: &TimeSeriesSample, len: usize) -> Result<TimeSeriesSample> {
    if len < SEGMENT_LEN || !len.is_multiple_of(SEGMENT_LEN) {
        return Err(Error::Config(format!(
            "window length {len} must be a positive multiple of {SEGMENT_LEN}"
        )));
    }
    let mut values: Vec<f64> = sample.values.iter().take(len).copied().collect();
    let last = values.last().copied().unwrap_or(0.0);
    values.resize(len, last);
    Ok(TimeSeriesSample {
        id: sample.id.clone(),
        values,
        target: sample.target,
    })
}

pub fn fit_window_all(ds: &Dataset, len: usize) -> Result<Dataset> {
    let samples = ds
        .samples
        .iter()
        .map(|s| fit_window(s, len))
        .collect::<Result<_>>()?;
    Ok(ds.with_samples(samples))
}

/// Per-dataset z-score map fitted on a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    /// Population standard deviation; clamped to 1 when degenerate.
    pub std: f64,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.samples.iter().map(|s| s.values.len()).sum::<usize>();
        if n == 0 {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = train.samples.iter().flat_map(|s| &s.values).sum::<f64>() / n as f64;
        let var = train
            .samples
            .iter()
            .flat_map(|s| &s.values)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let samples = ds
            .samples
            .iter()
            .map(|s| TimeSeriesSample {
                id: s.id.clone(),
                values: s.values.iter().map(|v| (v - self.mean) / self.std).collect(),
                target: s.target,
            })
            .collect();
        ds.with_samples(samples)
    }
}

/// Fits a z-score map on `train` and applies it to `train` and every other
/// split.
pub fn zscore(train: &Dataset, others: &[&Dataset]) -> (Dataset, Vec<Dataset>, Normalizer) {
    let norm = Normalizer::fit(train);
    let rest = others.iter().map(|d| norm.apply(d)).collect();
    (norm.apply(train), rest, norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

/// Deterministic train/validation split, stratified for classification.
/// Both halves keep the original sample order.
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction {} outside (0, 1)",
            spec.val_fraction
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let key = match ds.task {
            Task::Classification { .. } => s.target.class().unwrap_or(0),
            Task::Regression => 0,
        };
        groups.entry(key).or_default().push(i);
    }
    let mut val_idx = Vec::new();
    for (class, mut idx) in groups {
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} sample(s); stratified split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * spec.val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val_idx.extend_from_slice(&idx[..k]);
    }
    val_idx.sort_unstable();
    let mut in_val = vec![false; ds.len()];
    for &i in &val_idx {
        in_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in ds.samples.iter().zip(in_val) {
        if v {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((ds.with_samples(train), ds.with_samples(val)))
}
