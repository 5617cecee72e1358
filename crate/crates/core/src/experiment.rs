//! Config-driven experiment runner: data preparation, attribute predictor,
//! denoisers, then one downstream training per grid cell and repetition.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentMethod, Augmenter, AugmenterSpec};
use crate::data::{self, Dataset, Format, Normalizer, SplitSpec, TaskSpec};
use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::meta_attr::{attribute_labels, extract_batch, AttributeStandardizer};
use crate::models::{AttributePredictor, Denoiser, DenoiserConfig, DenoiserMode, DownstreamConfig};
use crate::nn::checkpoint;
use crate::stats::{Arm, ResultRecord};
use crate::synth::{self, SynthSpec};
use crate::training::{self, DownstreamOptions, InputJitter, TrainConfig};

/// Stand-in grid of noise rates.
pub const DEFAULT_NOISE_RATES: [f64; 10] = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0, 1.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub attributes: AttributeStage,
    #[serde(default)]
    pub denoiser: DenoiserStage,
    /// Diffusion schedule used both to train and to apply the diffusion model.
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub downstream: DownstreamStage,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads for grid cells; defaults to the available cores.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Record wall-clock training time in the results. Disable for
    /// byte-identical reruns.
    #[serde(default = "yes")]
    pub record_timing: bool,
}

fn default_reps() -> usize {
    3
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub source: DataSource,
    /// Window length (a multiple of 32); defaults to the longest such window
    /// that fits the series.
    #[serde(default)]
    pub window_len: Option<usize>,
    /// Fraction of the training file held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        #[serde(default)]
        spec: SynthSpec,
        #[serde(default)]
        seed: Option<u64>,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
        format: Format,
        task: TaskSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeStage {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for AttributeStage {
    fn default() -> Self {
        Self {
            hidden: vec![32, 64, 128],
            train: TrainConfig {
                input_jitter: Some(InputJitter::default()),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserStage {
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub kernel: usize,
    pub train: TrainConfig,
}

impl Default for DenoiserStage {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256],
            time_embed_dim: 32,
            kernel: 3,
            train: TrainConfig {
                input_jitter: Some(InputJitter::default()),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamArch {
    pub branch_channels: usize,
    pub conv_channels: [usize; 2],
    pub fc: [usize; 2],
}

impl Default for DownstreamArch {
    fn default() -> Self {
        Self {
            branch_channels: 8,
            conv_channels: [32, 32],
            fc: [64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamStage {
    pub model: DownstreamArch,
    pub train: TrainConfig,
    /// Train on an `n`-fold synthetic set built once instead of replacing
    /// each batch.
    pub eager_expansion: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub methods: Vec<AugmentMethod>,
    #[serde(default = "default_rates")]
    pub noise_rates: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
    /// Conditioning variants of the denoising methods.
    #[serde(default = "default_conditional")]
    pub conditional: Vec<bool>,
}

fn default_rates() -> Vec<f64> {
    DEFAULT_NOISE_RATES.to_vec()
}

fn default_steps() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_conditional() -> Vec<bool> {
    vec![true]
}

/// One downstream run of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: AugmentMethod,
    pub conditional: bool,
    pub r: Option<f64>,
    pub steps: Option<usize>,
    pub rep: usize,
}

impl Cell {
    pub fn arm(&self) -> Arm {
        Arm::new(self.method, self.conditional)
    }

    /// Identifier used for seeds and file names.
    pub fn id(&self) -> String {
        let mut s = self.arm().label();
        if let Some(r) = self.r {
            s.push_str(&format!("_r{r:?}"));
        }
        if let Some(k) = self.steps {
            s.push_str(&format!("_s{k}"));
        }
        s.push_str(&format!("_rep{}", self.rep));
        s
    }
}

impl GridConfig {
    /// Cells in enumeration order: method, conditioning, rate, steps, rep.
    /// Noise has no steps dimension and raw has neither.
    pub fn cells(&self, reps: usize) -> Vec<Cell> {
        let mut out = Vec::new();
        let mut push = |method, conditional, r, steps| {
            for rep in 0..reps {
                out.push(Cell {
                    method,
                    conditional,
                    r,
                    steps,
                    rep,
                });
            }
        };
        for &m in &self.methods {
            match m {
                AugmentMethod::Raw => push(m, false, None, None),
                AugmentMethod::Noise => {
                    for &r in &self.noise_rates {
                        push(m, false, Some(r), None);
                    }
                }
                AugmentMethod::Dae | AugmentMethod::Dpm => {
                    for &c in &self.conditional {
                        for &r in &self.noise_rates {
                            for &s in &self.steps {
                                push(m, c, Some(r), Some(s));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Denoisers the grid needs, as `(mode, conditional)`.
    pub fn denoisers(&self) -> Vec<(DenoiserMode, bool)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            let mode = match m {
                AugmentMethod::Dae => DenoiserMode::Dae,
                AugmentMethod::Dpm => DenoiserMode::Dpm,
                _ => continue,
            };
            for &c in &self.conditional {
                if !out.contains(&(mode, c)) {
                    out.push((mode, c));
                }
            }
        }
        out
    }
}

fn denoiser_label(mode: DenoiserMode, conditional: bool) -> String {
    let method = match mode {
        DenoiserMode::Dae => AugmentMethod::Dae,
        DenoiserMode::Dpm => AugmentMethod::Dpm,
    };
    Arm::new(method, conditional).label()
}

/// Parses JSON, reporting the path of the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        msg: e.inner().to_string(),
    })
}

/// [`parse_json`] on a file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_json(&fs::read_to_string(path)?)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    /// Hash of the settings that determine the results; where they are
    /// written and how many threads compute them are left out.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("workers");
        }
        Ok(checkpoint::content_hash(serde_json::to_string(&v)?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |path: &str, msg: String| Err(Error::Schema { path: path.into(), msg });
        let g = &self.grid;
        if g.methods.is_empty() {
            return schema("grid.methods", "grid must name at least one method".into());
        }
        let perturbs = g.methods.iter().any(|m| *m != AugmentMethod::Raw);
        if perturbs && g.noise_rates.is_empty() {
            return schema("grid.noise_rates", "noise rate list is empty".into());
        }
        if let Some(r) = g.noise_rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return schema("grid.noise_rates", format!("noise rate {r} is not positive"));
        }
        if g.methods.iter().any(|m| m.denoises()) {
            if g.steps.is_empty() || g.steps.iter().any(|s| !(1..=3).contains(s)) {
                return schema("grid.steps", format!("steps must be a non-empty subset of {{1, 2, 3}}, got {:?}", g.steps));
            }
            if g.conditional.is_empty() {
                return schema("grid.conditional", "conditioning list is empty".into());
            }
        }
        if self.repetitions == 0 {
            return schema("repetitions", "at least one repetition".into());
        }
        if let Some(0) = self.workers {
            return schema("workers", "at least one worker".into());
        }
        if let Some(l) = self.dataset.window_len {
            if l == 0 || l % data::SEGMENT_LEN != 0 {
                return schema("dataset.window_len", format!("{l} is not a positive multiple of 32"));
            }
        }
        for (path, t) in [
            ("attributes.train", &self.attributes.train),
            ("denoiser.train", &self.denoiser.train),
            ("downstream.train", &self.downstream.train),
        ] {
            if let Err(e) = t.validate() {
                return schema(path, e.to_string());
            }
        }
        if let Err(e) = self.schedule.build() {
            return schema("schedule", e.to_string());
        }
        Ok(())
    }
}

/// Deterministic 64-bit seed from a master seed and a text tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Windowed and normalised splits ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalizer: Option<Normalizer>,
    pub window_len: usize,
}

pub fn prepare_data(cfg: &DatasetConfig, master_seed: u64) -> Result<PreparedData> {
    let (train, val, test) = match &cfg.source {
        DataSource::Synthetic {
            n_train,
            n_val,
            n_test,
            spec,
            seed,
        } => {
            let seed = seed.unwrap_or_else(|| derive_seed(master_seed, "data"));
            (
                synth::generate(*n_train, spec, derive_seed(seed, "train"))?,
                synth::generate(*n_val, spec, derive_seed(seed, "val"))?,
                synth::generate(*n_test, spec, derive_seed(seed, "test"))?,
            )
        }
        DataSource::Files {
            train,
            test,
            format,
            task,
        } => {
            let full = data::load_dataset(train, *format, *task)?;
            let test = data::load_dataset(test, *format, *task)?;
            let (tr, va) = data::split(
                &full,
                SplitSpec {
                    val_fraction: cfg.val_fraction,
                    seed: derive_seed(master_seed, "split"),
                },
            )?;
            (tr, va, test)
        }
    };
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Data("train, validation and test splits must be non-empty".into()));
    }
    let len = match cfg.window_len {
        Some(l) => l,
        None => {
            let l = train.series_len() / data::SEGMENT_LEN * data::SEGMENT_LEN;
            if l == 0 {
                return Err(Error::Data(format!(
                    "series of length {} are shorter than one 32-point segment",
                    train.series_len()
                )));
            }
            l
        }
    };
    let (train, val, test) = (
        data::fit_window_all(&train, len)?,
        data::fit_window_all(&val, len)?,
        data::fit_window_all(&test, len)?,
    );
    if cfg.normalize {
        let (train, rest, norm) = data::zscore(&train, &[&val, &test]);
        let [val, test]: [Dataset; 2] = rest.try_into().expect("two splits");
        Ok(PreparedData {
            train,
            val,
            test,
            normalizer: Some(norm),
            window_len: len,
        })
    } else {
        Ok(PreparedData {
            train,
            val,
            test,
            normalizer: None,
            window_len: len,
        })
    }
}

/// Files and results produced by [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub output_dir: PathBuf,
    pub records: Vec<ResultRecord>,
    /// Denoisers trained, by label.
    pub denoisers: Vec<String>,
}

pub fn results_path(out: &Path) -> PathBuf {
    out.join("results.jsonl")
}

pub fn cell_checkpoint_path(out: &Path, cell: &Cell) -> PathBuf {
    out.join("models").join(format!("{}.ckpt", cell.id()))
}

pub fn denoiser_checkpoint_path(out: &Path, mode: DenoiserMode, conditional: bool) -> PathBuf {
    out.join("denoisers").join(format!("{}.ckpt", denoiser_label(mode, conditional)))
}

struct TrainedDenoiser {
    mode: DenoiserMode,
    conditional: bool,
    model: Result<(Denoiser, String), String>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn isolated<T>(f: impl FnOnce() -> Result<T>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(format!("panic: {}", panic_message(p))),
    }
}

/// Runs the whole experiment and writes every artefact under the configured
/// output directory. A failing cell is recorded with its error and does not
/// stop the remaining cells.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let config_hash = cfg.hash()?;
    let threads = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let prepared = prepare_data(&cfg.dataset, cfg.master_seed)?;
    let (train, val, test) = (&prepared.train, &prepared.val, &prepared.test);
    for (name, ds) in [("train", train), ("val", val), ("test", test)] {
        ds.write(&out.join("data").join(format!("{name}.tsv")), Format::UcrTsv)?;
    }
    if let Some(n) = &prepared.normalizer {
        fs::write(out.join("data").join("normalizer.json"), serde_json::to_string_pretty(n)?)?;
    }

    // attributes of the training split
    let attrs = pool.install(|| extract_batch(&train.values()))?;
    write_attributes(&out.join("attributes.csv"), &attrs, prepared.window_len)?;

    let needed = cfg.grid.denoisers();
    let attr_model = if needed.iter().any(|(_, c)| *c) {
        let mut tc = cfg.attributes.train.clone();
        tc.seed = derive_seed(cfg.master_seed, "attributes");
        let (model, standardizer, report) =
            training::train_attribute_predictor(train, val, &tc, Some(cfg.attributes.hidden.clone()))?;
        // kept out of the top level, which holds only result files
        let dir = out.join("attributes");
        fs::create_dir_all(&dir)?;
        model.save(&dir.join("predictor.ckpt"))?;
        save_standardizer(&dir.join("standardizer.json"), &standardizer)?;
        report.write_jsonl(&dir.join("report.jsonl"))?;
        Some(model)
    } else {
        None
    };

    let trained: Vec<TrainedDenoiser> = pool.install(|| {
        needed
            .par_iter()
            .map(|&(mode, conditional)| TrainedDenoiser {
                mode,
                conditional,
                model: isolated(|| {
                    train_denoiser_stage(cfg, &out, train, val, mode, conditional, attr_model.as_ref())
                }),
            })
            .collect()
    });
    for d in &trained {
        if let Err(e) = &d.model {
            log::error!("denoiser {} failed: {e}", denoiser_label(d.mode, d.conditional));
        }
    }

    let cells = cfg.grid.cells(cfg.repetitions);
    let ctx = CellContext {
        cfg,
        out: &out,
        config_hash: &config_hash,
        train,
        val,
        test,
        attr_model: attr_model.as_ref(),
        denoisers: &trained,
    };
    let records: Vec<ResultRecord> = pool.install(|| cells.par_iter().map(|c| ctx.run(c)).collect());

    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(results_path(&out), text)?;
    Ok(PipelineOutput {
        output_dir: out,
        records,
        denoisers: trained
            .iter()
            .filter(|d| d.model.is_ok())
            .map(|d| denoiser_label(d.mode, d.conditional))
            .collect(),
    })
}

fn write_attributes(path: &Path, rows: &[Vec<f64>], len: usize) -> Result<()> {
    let mut text = attribute_labels(len).join(",");
    text.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn save_standardizer(path: &Path, s: &AttributeStandardizer) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(s)?)?;
    Ok(())
}

fn train_denoiser_stage(
    cfg: &ExperimentConfig,
    out: &Path,
    train: &Dataset,
    val: &Dataset,
    mode: DenoiserMode,
    conditional: bool,
    attr_model: Option<&AttributePredictor>,
) -> Result<(Denoiser, String)> {
    let label = denoiser_label(mode, conditional);
    let mut dcfg = DenoiserConfig::new(train.series_len(), mode, conditional);
    dcfg.widths = cfg.denoiser.widths.clone();
    dcfg.time_embed_dim = cfg.denoiser.time_embed_dim;
    dcfg.kernel = cfg.denoiser.kernel;
    let mut tc = cfg.denoiser.train.clone();
    tc.seed = derive_seed(cfg.master_seed, &format!("denoiser/{label}"));
    tc.schedule = cfg.schedule;
    let attr_model = if conditional { attr_model } else { None };
    let (model, report) = match mode {
        DenoiserMode::Dae => training::train_dae(train, val, attr_model, &tc, dcfg)?,
        DenoiserMode::Dpm => training::train_dpm(train, val, attr_model, &tc, dcfg)?,
    };
    let path = denoiser_checkpoint_path(out, mode, conditional);
    fs::create_dir_all(path.parent().expect("has parent"))?;
    let hash = model.save(&path)?;
    report.write_jsonl(&path.with_extension("report.jsonl"))?;
    Ok((model, hash))
}

struct CellContext<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    config_hash: &'a str,
    train: &'a Dataset,
    val: &'a Dataset,
    test: &'a Dataset,
    attr_model: Option<&'a AttributePredictor>,
    denoisers: &'a [TrainedDenoiser],
}

struct CellOutcome {
    test_loss: f64,
    best_val_loss: f64,
    seconds: f64,
    denoiser_hash: Option<String>,
    model_hash: String,
}

impl CellContext<'_> {
    fn run(&self, cell: &Cell) -> ResultRecord {
        let seed = derive_seed(self.cfg.master_seed, &format!("{}/{}", self.cfg.dataset.name, cell.id()));
        let mut rec = ResultRecord {
            dataset: self.cfg.dataset.name.clone(),
            net: "cnn".into(),
            method: cell.method,
            conditional: cell.conditional,
            r: cell.r,
            steps: cell.steps,
            rep: cell.rep,
            seed,
            test_loss: None,
            best_val_loss: None,
            train_seconds: None,
            config_hash: self.config_hash.to_string(),
            denoiser_checkpoint_hash: None,
            model_checkpoint_hash: None,
            error: None,
        };
        match isolated(|| self.train_cell(cell, seed)) {
            Ok(o) => {
                rec.test_loss = Some(o.test_loss);
                rec.best_val_loss = Some(o.best_val_loss);
                rec.train_seconds = self.cfg.record_timing.then_some(o.seconds);
                rec.denoiser_checkpoint_hash = o.denoiser_hash;
                rec.model_checkpoint_hash = Some(o.model_hash);
            }
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.id());
                rec.error = Some(e);
            }
        }
        rec
    }

    fn train_cell(&self, cell: &Cell, seed: u64) -> Result<CellOutcome> {
        let spec = AugmenterSpec {
            method: cell.method,
            noise_rate: cell.r.unwrap_or(0.0),
            steps: cell.steps.unwrap_or(1),
            conditional: cell.conditional,
            checkpoint: None,
            seed,
        };
        let (denoiser, denoiser_hash, checkpoint) = match cell.method {
            AugmentMethod::Dae | AugmentMethod::Dpm => {
                let mode = if cell.method == AugmentMethod::Dae {
                    DenoiserMode::Dae
                } else {
                    DenoiserMode::Dpm
                };
                let path = denoiser_checkpoint_path(self.out, mode, cell.conditional);
                let d = self
                    .denoisers
                    .iter()
                    .find(|d| d.mode == mode && d.conditional == cell.conditional)
                    .ok_or_else(|| Error::MissingFile(path.clone()))?;
                match &d.model {
                    Ok((m, h)) => (Some(m), Some(h.clone()), Some(path)),
                    Err(e) => return Err(Error::Data(format!("denoiser {} unavailable: {e}", path.display()))),
                }
            }
            _ => (None, None, None),
        };
        let spec = AugmenterSpec { checkpoint, ..spec };
        let schedule = self.cfg.schedule.build()?;
        let augmenter = Augmenter::from_spec(&spec, denoiser, self.attr_model, Some(&schedule))?;
        let mut tc = self.cfg.downstream.train.clone();
        tc.seed = seed;
        let arch = &self.cfg.downstream.model;
        let opts = DownstreamOptions {
            model: Some(DownstreamConfig {
                input_len: self.train.series_len(),
                task: self.train.task,
                branch_channels: arch.branch_channels,
                conv_channels: arch.conv_channels,
                fc: arch.fc,
            }),
            augment_seed: derive_seed(seed, "augment"),
            eager_expansion: self.cfg.downstream.eager_expansion,
        };
        let (model, report) = training::train_downstream(self.train, self.val, &augmenter, &tc, &opts)?;
        let test_loss = training::evaluate_dataset(&model, self.test)?;
        let path = cell_checkpoint_path(self.out, cell);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        let model_hash = model.save(&path)?;
        Ok(CellOutcome {
            test_loss,
            best_val_loss: report.best_val_loss,
            seconds: report.wall_seconds,
            denoiser_hash,
            model_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(methods: Vec<AugmentMethod>) -> GridConfig {
        GridConfig {
            methods,
            noise_rates: vec![0.1, 0.3],
            steps: vec![1, 2, 3],
            conditional: vec![true],
        }
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(grid(vec![AugmentMethod::Raw]).cells(3).len(), 3);
        let g = grid(vec![AugmentMethod::Noise, AugmentMethod::Dpm]);
        let cells = g.cells(3);
        let noise = cells.iter().filter(|c| c.method == AugmentMethod::Noise).count();
        let dpm = cells.iter().filter(|c| c.method == AugmentMethod::Dpm).count();
        assert_eq!((noise, dpm), (6, 18));
        assert!(cells.iter().filter(|c| c.method == AugmentMethod::Noise).all(|c| c.steps.is_none()));
        assert_eq!(g.denoisers(), vec![(DenoiserMode::Dpm, true)]);
        assert!(grid(vec![AugmentMethod::Raw]).denoisers().is_empty());
    }

    #[test]
    fn cell_ids_are_unique() {
        let mut g = grid(vec![AugmentMethod::Raw, AugmentMethod::Noise, AugmentMethod::Dae, AugmentMethod::Dpm]);
        g.conditional = vec![true, false];
        let ids: Vec<String> = g.cells(3).iter().map(Cell::id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
    }

    #[test]
    fn seeds_depend_on_tag_and_master() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    const MINIMAL: &str = r#"{
        "dataset": {"name": "synthetic", "source": {"synthetic": {"n_train": 9, "n_val": 6, "n_test": 6}}},
        "grid": {"methods": ["raw"]},
        "output_dir": "out"
    }"#;

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.repetitions, 3);
        assert_eq!(cfg.grid.noise_rates, DEFAULT_NOISE_RATES.to_vec());
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = MINIMAL.replace("\"n_train\": 9", "\"n_train\": \"nine\"");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "dataset.source.synthetic.n_train"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"methods\": [\"raw\"]", "\"methods\": [\"raw\"], \"steps\": [4]");
        let bad = bad.replace("[\"raw\"]", "[\"dpm\"]");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "grid.steps"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"grid\"", "\"gird\"");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Schema { .. })));
    }
}
