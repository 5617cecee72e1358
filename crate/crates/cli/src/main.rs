//! `dda`: command-line front end for denoising-driven time-series augmentation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dda_core::augment::{AugmentMethod, Augmenter, AugmenterSpec};
use dda_core::data::{self, Dataset, Format, SplitSpec, TaskSpec, TimeSeriesSample};
use dda_core::diffusion::ScheduleSpec;
use dda_core::experiment::{self, read_json, run_pipeline, ExperimentConfig};
use dda_core::meta_attr::{extract_batch, AttributeStandardizer};
use dda_core::models::{AttributePredictor, Denoiser, DenoiserConfig, DenoiserMode, DownstreamModel};
use dda_core::nn::{checkpoint, Tensor};
use dda_core::stats::{self, Arm};
use dda_core::synth::{self, SynthSpec};
use dda_core::training::{self, DownstreamOptions, TrainConfig};
use dda_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dda", version, about = "Denoising-driven data augmentation for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed; overrides the seed in `--config`.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON configuration for this stage.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required for this command".into()))
    }

    fn config_or_default<T: serde::de::DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            Some(p) => read_json(p),
            None => Ok(T::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    UcrTsv,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::UcrTsv => Format::UcrTsv,
            FormatArg::Csv => Format::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
}

#[derive(Args, Clone)]
struct DataOpts {
    #[arg(long, value_enum, default_value = "ucr-tsv")]
    format: FormatArg,
    #[arg(long, value_enum, default_value = "classification")]
    task: TaskArg,
    /// Min-max scale regression targets to [0, 1].
    #[arg(long)]
    min_max: bool,
}

impl DataOpts {
    fn load(&self, path: &Path) -> Result<Dataset> {
        let task = match self.task {
            TaskArg::Classification => TaskSpec::Classification { n_classes: None },
            TaskArg::Regression => TaskSpec::Regression { min_max: self.min_max },
        };
        data::load_dataset(path, self.format.into(), task)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Raw,
    Noise,
    Dae,
    Dpm,
}

impl From<MethodArg> for AugmentMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Raw => AugmentMethod::Raw,
            MethodArg::Noise => AugmentMethod::Noise,
            MethodArg::Dae => AugmentMethod::Dae,
            MethodArg::Dpm => AugmentMethod::Dpm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dae,
    Dpm,
}

/// Augmentation strategy given by flags or by an `AugmenterSpec` JSON file.
#[derive(Args, Clone)]
struct AugmentOpts {
    /// AugmenterSpec JSON; replaces the strategy flags below.
    #[arg(long)]
    augment: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "raw")]
    method: MethodArg,
    /// Noise rate r.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    /// Denoising steps (1 to 3).
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    conditional: bool,
    /// Denoiser checkpoint.
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Attribute predictor checkpoint, for conditional denoisers.
    #[arg(long)]
    attr_model: Option<PathBuf>,
    /// Diffusion schedule JSON; the default linear schedule otherwise.
    #[arg(long)]
    schedule: Option<PathBuf>,
}

/// Models resolved for an augmentation strategy.
struct Resolved {
    spec: AugmenterSpec,
    denoiser: Option<Denoiser>,
    denoiser_hash: Option<String>,
    attr_model: Option<AttributePredictor>,
    schedule: ScheduleSpec,
}

impl Resolved {
    fn augmenter(&self) -> Result<Augmenter<'_>> {
        let schedule = self.schedule.build()?;
        Augmenter::from_spec(&self.spec, self.denoiser.as_ref(), self.attr_model.as_ref(), Some(&schedule))
    }
}

impl AugmentOpts {
    fn resolve(&self, seed: Option<u64>) -> Result<Resolved> {
        let mut spec = match &self.augment {
            Some(p) => read_json::<AugmenterSpec>(p)?,
            None => AugmenterSpec {
                method: self.method.into(),
                noise_rate: self.rate,
                steps: self.steps,
                conditional: self.conditional,
                checkpoint: self.denoiser.clone(),
                seed: 0,
            },
        };
        if let Some(s) = seed {
            spec.seed = s;
        }
        spec.validate()?;
        let (denoiser, denoiser_hash) = match (&spec.checkpoint, spec.method.denoises()) {
            (Some(p), true) => (Some(Denoiser::load(p)?), Some(file_hash(p)?)),
            (None, true) => {
                return Err(Error::Config(format!(
                    "{} augmentation needs --denoiser",
                    spec.method.as_str()
                )))
            }
            _ => (None, None),
        };
        let attr_model = match (&self.attr_model, spec.conditional && spec.method.denoises()) {
            (Some(p), true) => Some(AttributePredictor::load(p)?),
            (None, true) => return Err(Error::Config("conditional augmentation needs --attr-model".into())),
            _ => None,
        };
        let schedule = match &self.schedule {
            Some(p) => read_json(p)?,
            None => ScheduleSpec::default(),
        };
        Ok(Resolved {
            spec,
            denoiser,
            denoiser_hash,
            attr_model,
            schedule,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the built-in sine/square/sawtooth dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Number of series; class i % 3 for series i.
        #[arg(long, default_value_t = 90)]
        n: usize,
        #[arg(long, value_enum, default_value = "ucr-tsv")]
        format: FormatArg,
    },
    /// Extract standardised meta-attributes to CSV, with a sidecar JSON.
    ExtractAttrs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        data_opts: DataOpts,
        /// Apply this standardizer instead of fitting one on `--data`.
        #[arg(long)]
        standardizer: Option<PathBuf>,
    },
    /// Train the attribute predictor.
    TrainAttr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        /// Validation set; split off the training file when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        data_opts: DataOpts,
        /// Hidden widths, comma separated.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
    },
    /// Train a denoising autoencoder or diffusion model.
    TrainDenoiser {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        data_opts: DataOpts,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        conditional: bool,
        #[arg(long)]
        attr_model: Option<PathBuf>,
        /// Channel widths per level, comma separated.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        time_embed_dim: Option<usize>,
        #[arg(long)]
        kernel: Option<usize>,
    },
    /// Write synthetic copies of a dataset and a JSON manifest.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        data_opts: DataOpts,
        #[command(flatten)]
        augment: AugmentOpts,
        /// Synthetic copies per sample.
        #[arg(long, default_value_t = 1)]
        copies: usize,
    },
    /// Train the downstream CNN with an augmentation strategy.
    TrainDownstream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        data_opts: DataOpts,
        #[command(flatten)]
        augment: AugmentOpts,
        /// Build an n-fold synthetic set once instead of per batch.
        #[arg(long)]
        eager_expansion: Option<usize>,
    },
    /// Mean loss of a downstream model on a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        data_opts: DataOpts,
    },
    /// Bayesian signed-rank comparison of two strategies in a results directory.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: PathBuf,
        /// Strategy a, e.g. `dpm_cond`.
        #[arg(long)]
        a: String,
        /// Strategy b, e.g. `raw`.
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = stats::DEFAULT_ROPE)]
        rope: f64,
        #[arg(long, default_value_t = stats::DEFAULT_DRAWS)]
        draws: usize,
        /// Also write the (r x steps) mean-loss matrix of strategy a as CSV.
        #[arg(long)]
        emit_grid: Option<PathBuf>,
    },
    /// Run a full experiment from an ExperimentConfig.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(checkpoint::content_hash(&fs::read(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v)?)
}

/// `model.ckpt` -> `model.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = common.config_or_default()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_val(train: &Path, val: Option<&Path>, opts: &DataOpts, seed: u64) -> Result<(Dataset, Dataset)> {
    let full = opts.load(train)?;
    match val {
        Some(v) => Ok((full, opts.load(v)?)),
        None => data::split(
            &full,
            SplitSpec {
                val_fraction: 0.2,
                seed,
            },
        ),
    }
}

fn synth_data(common: &Common, n: usize, format: FormatArg) -> Result<()> {
    let spec: SynthSpec = common.config_or_default()?;
    let ds = synth::generate(n, &spec, common.seed.unwrap_or(0))?;
    ds.write(common.out()?, format.into())?;
    println!("wrote {} series of length {} to {}", ds.len(), ds.series_len(), common.out()?.display());
    Ok(())
}

fn extract_attrs(common: &Common, path: &Path, opts: &DataOpts, standardizer: Option<&Path>) -> Result<()> {
    let ds = opts.load(path)?;
    let raw = extract_batch(&ds.values())?;
    let st = match standardizer {
        Some(p) => read_json::<AttributeStandardizer>(p)?,
        None => AttributeStandardizer::fit(&raw)?,
    };
    let n = st.mean.len();
    let mut text = String::from("sample_id");
    for i in 0..n {
        write!(text, ",a_{i}").expect("string write");
    }
    text.push('\n');
    for (s, r) in ds.samples.iter().zip(&raw) {
        text.push_str(&s.id);
        for v in st.apply(r)? {
            write!(text, ",{v:?}").expect("string write");
        }
        text.push('\n');
    }
    let out = common.out()?;
    write_text(out, &text)?;
    write_json(&sidecar(out, "json"), &serde_json::to_value(&st)?)?;
    println!("wrote {n} attributes for {} series to {}", ds.len(), out.display());
    Ok(())
}

fn train_attr(common: &Common, train: &Path, val: Option<&Path>, opts: &DataOpts, hidden: Option<Vec<usize>>) -> Result<()> {
    let cfg = train_config(common)?;
    let (tr, va) = train_val(train, val, opts, cfg.seed)?;
    let (model, st, report) = training::train_attribute_predictor(&tr, &va, &cfg, hidden)?;
    let out = common.out()?;
    let hash = model.save(out)?;
    experiment::save_standardizer(&sidecar(out, "standardizer.json"), &st)?;
    report.write_jsonl(&sidecar(out, "report.jsonl"))?;
    println!(
        "best validation mse {:?} at step {}; checkpoint {} ({hash})",
        report.best_val_loss,
        report.best_step,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_denoiser(
    common: &Common,
    train: &Path,
    val: Option<&Path>,
    opts: &DataOpts,
    mode: ModeArg,
    conditional: bool,
    attr_model: Option<&Path>,
    widths: Option<Vec<usize>>,
    time_embed_dim: Option<usize>,
    kernel: Option<usize>,
) -> Result<()> {
    let cfg = train_config(common)?;
    let (tr, va) = train_val(train, val, opts, cfg.seed)?;
    let mode = match mode {
        ModeArg::Dae => DenoiserMode::Dae,
        ModeArg::Dpm => DenoiserMode::Dpm,
    };
    let attr = match (conditional, attr_model) {
        (true, Some(p)) => Some(AttributePredictor::load(p)?),
        (true, None) => return Err(Error::Config("a conditional denoiser needs --attr-model".into())),
        (false, _) => None,
    };
    let mut dcfg = DenoiserConfig::new(tr.series_len(), mode, conditional);
    if let Some(w) = widths {
        dcfg.widths = w;
    }
    if let Some(d) = time_embed_dim {
        dcfg.time_embed_dim = d;
    }
    if let Some(k) = kernel {
        dcfg.kernel = k;
    }
    let (model, report) = match mode {
        DenoiserMode::Dae => training::train_dae(&tr, &va, attr.as_ref(), &cfg, dcfg)?,
        DenoiserMode::Dpm => training::train_dpm(&tr, &va, attr.as_ref(), &cfg, dcfg)?,
    };
    let out = common.out()?;
    let hash = model.save(out)?;
    report.write_jsonl(&sidecar(out, "report.jsonl"))?;
    println!(
        "best validation loss {:?} at step {}; checkpoint {} ({hash})",
        report.best_val_loss,
        report.best_step,
        out.display()
    );
    Ok(())
}

fn augment(common: &Common, path: &Path, opts: &DataOpts, aug: &AugmentOpts, copies: usize) -> Result<()> {
    if copies == 0 {
        return Err(Error::Config("--copies must be at least 1".into()));
    }
    let ds = opts.load(path)?;
    let resolved = aug.resolve(common.seed)?;
    let augmenter = resolved.augmenter()?;
    let x = Tensor::from_series(&ds.values())?;
    let synthetic = augmenter.expand(&x, copies, resolved.spec.seed)?;
    let samples = ds
        .samples
        .iter()
        .flat_map(|s| (0..copies).map(move |k| (s, k)))
        .enumerate()
        .map(|(j, (s, k))| TimeSeriesSample {
            id: format!("{}#aug{k}", s.id),
            values: synthetic.item(j).to_vec(),
            target: s.target,
        })
        .collect();
    let out_ds = ds.with_samples(samples);
    let out = common.out()?;
    let format: Format = opts.format.into();
    out_ds.write(out, format)?;
    let manifest = json!({
        "source": path,
        "source_hash": file_hash(path)?,
        "spec": resolved.spec,
        "schedule": resolved.schedule,
        "denoiser_checkpoint_hash": resolved.denoiser_hash,
        "attr_model": aug.attr_model,
        "copies": copies,
        "n_samples": out_ds.len(),
        "format": format,
        "output_hash": file_hash(out)?,
    });
    write_json(&sidecar(out, "manifest.json"), &manifest)?;
    println!("wrote {} synthetic series to {}", out_ds.len(), out.display());
    Ok(())
}

fn train_downstream(
    common: &Common,
    train: &Path,
    val: Option<&Path>,
    opts: &DataOpts,
    aug: &AugmentOpts,
    eager_expansion: Option<usize>,
) -> Result<()> {
    let cfg = train_config(common)?;
    let (tr, va) = train_val(train, val, opts, cfg.seed)?;
    let resolved = aug.resolve(common.seed)?;
    let augmenter = resolved.augmenter()?;
    let dopts = DownstreamOptions {
        model: None,
        augment_seed: resolved.spec.seed,
        eager_expansion,
    };
    let (model, report) = training::train_downstream(&tr, &va, &augmenter, &cfg, &dopts)?;
    let out = common.out()?;
    let hash = model.save(out)?;
    report.write_jsonl(&sidecar(out, "report.jsonl"))?;
    println!(
        "best validation loss {:?} at step {}; checkpoint {} ({hash})",
        report.best_val_loss,
        report.best_step,
        out.display()
    );
    Ok(())
}

fn evaluate(common: &Common, model: &Path, path: &Path, opts: &DataOpts) -> Result<()> {
    let m = DownstreamModel::load(model)?;
    let ds = opts.load(path)?;
    let loss = training::evaluate_dataset(&m, &ds)?;
    println!("mean_loss {loss:?}");
    if let Some(out) = &common.out {
        write_json(
            out,
            &json!({
                "model": model,
                "model_checkpoint_hash": file_hash(model)?,
                "data": path,
                "n_samples": ds.len(),
                "mean_loss": loss,
            }),
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn compare(
    common: &Common,
    results: &Path,
    a: &str,
    b: &str,
    rope: f64,
    draws: usize,
    emit_grid: Option<&Path>,
) -> Result<()> {
    let (a, b) = (Arm::parse(a)?, Arm::parse(b)?);
    let records = stats::load_results(results)?;
    let agg = stats::aggregate_records(&records, a, b)?;
    let seed = common.seed.unwrap_or(0);
    let res = stats::bayesian_signed_rank(&agg.pairs, rope, draws, seed)?;
    let out = common.out()?;
    let mut text = String::from("cell,loss_a,loss_b,ratio\n");
    for (key, &(la, lb)) in agg.keys.iter().zip(agg.pairs.pairs()) {
        writeln!(text, "{key},{la:?},{lb:?},{:?}", stats::loss_ratio(la, lb)).expect("string write");
    }
    write_text(out, &text)?;
    write_json(
        &sidecar(out, "json"),
        &json!({
            "a": a.label(),
            "b": b.label(),
            "seed": seed,
            "result": res,
            "dropped": agg.dropped,
        }),
    )?;
    println!(
        "{} vs {} over {} pairs: p(a better) {:.4}, p(rope) {:.4}, p(b better) {:.4}",
        a.label(),
        b.label(),
        res.n_pairs,
        res.p_a_better,
        res.p_rope,
        res.p_b_better
    );
    if let Some(path) = emit_grid {
        write_text(path, &grid_csv(&stats::grid_means(&records, a)))?;
    }
    Ok(())
}

/// Rows `(dataset, r)`, one column per step count.
fn grid_csv(cells: &[(String, Option<f64>, Option<usize>, f64)]) -> String {
    let mut steps: Vec<Option<usize>> = cells.iter().map(|c| c.2).collect();
    steps.sort();
    steps.dedup();
    let mut rows: Vec<(String, Option<f64>)> = Vec::new();
    for (d, r, _, _) in cells {
        if !rows.iter().any(|(rd, rr)| rd == d && rr.map(f64::to_bits) == r.map(f64::to_bits)) {
            rows.push((d.clone(), *r));
        }
    }
    let label = |s: &Option<usize>| s.map_or("steps_none".to_string(), |s| format!("steps_{s}"));
    let mut text = String::from("dataset,r");
    for s in &steps {
        write!(text, ",{}", label(s)).expect("string write");
    }
    text.push('\n');
    for (d, r) in rows {
        write!(text, "{d},{}", r.map_or(String::new(), |r| format!("{r:?}"))).expect("string write");
        for s in &steps {
            let v = cells
                .iter()
                .find(|c| c.0 == d && c.1.map(f64::to_bits) == r.map(f64::to_bits) && &c.2 == s)
                .map_or(String::new(), |c| format!("{:?}", c.3));
            write!(text, ",{v}").expect("string write");
        }
        text.push('\n');
    }
    text
}

fn run(common: &Common) -> Result<()> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("run needs --config".into()))?;
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    let out = run_pipeline(&cfg)?;
    let failed = out.records.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} runs ({failed} failed); results in {}",
        out.records.len(),
        experiment::results_path(&out.output_dir).display()
    );
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::SynthData { common, n, format } => synth_data(common, *n, *format),
        Command::ExtractAttrs {
            common,
            data,
            data_opts,
            standardizer,
        } => extract_attrs(common, data, data_opts, standardizer.as_deref()),
        Command::TrainAttr {
            common,
            train,
            val,
            data_opts,
            hidden,
        } => train_attr(common, train, val.as_deref(), data_opts, hidden.clone()),
        Command::TrainDenoiser {
            common,
            train,
            val,
            data_opts,
            mode,
            conditional,
            attr_model,
            widths,
            time_embed_dim,
            kernel,
        } => train_denoiser(
            common,
            train,
            val.as_deref(),
            data_opts,
            *mode,
            *conditional,
            attr_model.as_deref(),
            widths.clone(),
            *time_embed_dim,
            *kernel,
        ),
        Command::Augment {
            common,
            data,
            data_opts,
            augment: aug,
            copies,
        } => augment(common, data, data_opts, aug, *copies),
        Command::TrainDownstream {
            common,
            train,
            val,
            data_opts,
            augment: aug,
            eager_expansion,
        } => train_downstream(common, train, val.as_deref(), data_opts, aug, *eager_expansion),
        Command::Evaluate {
            common,
            model,
            data,
            data_opts,
        } => evaluate(common, model, data, data_opts),
        Command::Compare {
            common,
            results,
            a,
            b,
            rope,
            draws,
            emit_grid,
        } => compare(common, results, a, b, *rope, *draws, emit_grid.as_deref()),
        Command::Run { common } => run(common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
