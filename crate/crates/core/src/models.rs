//! Attribute predictor, conditional U-Net denoiser and the downstream
//! multi-scale CNN.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, softmax_rows, Graph, Padding, ParamSet, Tensor, Var};

/// Models whose parameters are updated by the training loops.
pub trait Trainable {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

fn add_conv(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) {
    ps.insert_glorot(format!("{name}.w"), &[cout, cin, k], cin * k, cout * k, rng);
    ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn add_dense(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize) {
    ps.insert_glorot(format!("{name}.w"), &[fout, fin], fin, fout, rng);
    ps.insert(format!("{name}.b"), Tensor::zeros(&[fout]));
}

fn conv(g: &mut Graph, ps: &ParamSet, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    g.conv1d(x, w, Some(b), stride, Padding::Same)
}

fn dense(g: &mut Graph, ps: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    g.dense(x, w, Some(b))
}

fn save_model<C: Serialize>(path: &Path, kind: &str, config: &C, params: &ParamSet) -> Result<String> {
    let arch = serde_json::json!({ "model": kind, "config": config });
    checkpoint::save(path, &arch, params)
}

fn load_model<C: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<(C, ParamSet)> {
    let (arch, params) = checkpoint::load(path)?;
    if arch.get("model").and_then(|m| m.as_str()) != Some(kind) {
        return Err(Error::Data(format!(
            "{} is not a {kind} checkpoint",
            path.display()
        )));
    }
    let config = serde_json::from_value(arch["config"].clone())?;
    Ok((config, params))
}

fn check_series(op: &'static str, x: &Tensor, len: usize) -> Result<()> {
    match *x.shape() {
        [_, 1, l] if l == len => Ok(()),
        ref s => Err(Error::shape(op, format!("expected (batch, 1, {len}), got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Attribute predictor

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrPredictorConfig {
    pub input_len: usize,
    pub hidden: Vec<usize>,
    pub output_len: usize,
}

impl AttrPredictorConfig {
    pub fn new(input_len: usize) -> Self {
        Self {
            input_len,
            hidden: vec![32, 64, 128],
            output_len: crate::meta_attr::attribute_len(input_len),
        }
    }
}

/// Tanh MLP approximating the standardised meta-attribute vector.
#[derive(Debug, Clone)]
pub struct AttributePredictor {
    pub config: AttrPredictorConfig,
    params: ParamSet,
}

impl Trainable for AttributePredictor {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl AttributePredictor {
    pub fn new(config: AttrPredictorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fin = config.input_len;
        for (i, &h) in config.hidden.iter().enumerate() {
            add_dense(&mut params, &mut rng, &format!("hidden{i}"), fin, h);
            fin = h;
        }
        add_dense(&mut params, &mut rng, "out", fin, config.output_len);
        Self { config, params }
    }

    /// `x` is `(batch, input_len)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.config.hidden.len() {
            h = dense(g, &self.params, &format!("hidden{i}"), h)?;
            h = g.tanh(h);
        }
        dense(g, &self.params, "out", h)
    }

    /// Predicted attributes for a `(batch, 1, L)` or `(batch, L)` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.batch();
        if x.len() != b * self.config.input_len {
            return Err(Error::shape(
                "predict_attributes",
                format!("expected series of length {}, got shape {:?}", self.config.input_len, x.shape()),
            ));
        }
        let mut g = Graph::new();
        let xi = g.input(x.clone().reshape(vec![b, self.config.input_len])?);
        let y = self.forward(&mut g, xi)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        save_model(path, "attribute_predictor", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = load_model(path, "attribute_predictor")?;
        Ok(Self { config, params })
    }
}

// ---------------------------------------------------------------------------
// Denoiser

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserMode {
    /// Predicts the clean series directly.
    Dae,
    /// Predicts the added noise.
    Dpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub input_len: usize,
    pub attr_len: usize,
    /// Channel width of each downsampling stage.
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub kernel: usize,
    pub conditional: bool,
    pub mode: DenoiserMode,
}

impl DenoiserConfig {
    pub fn new(input_len: usize, mode: DenoiserMode, conditional: bool) -> Self {
        Self {
            input_len,
            attr_len: crate::meta_attr::attribute_len(input_len),
            widths: vec![32, 64, 128, 256],
            time_embed_dim: 32,
            kernel: 3,
            conditional,
            mode,
        }
    }

    /// Downsampling stages actually used: the bottleneck stays at >= 8 points.
    pub fn levels(&self) -> usize {
        let mut levels = 0;
        let mut len = self.input_len;
        while levels < self.widths.len() && len / 2 >= 8 && len.is_multiple_of(2) {
            len /= 2;
            levels += 1;
        }
        levels
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.levels() == 0 {
            return Err(Error::Config(format!(
                "denoiser needs at least one downsampling stage (len {}, widths {:?})",
                self.input_len, self.widths
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be even and kernel odd".into()));
        }
        if !self.input_len.is_multiple_of(1 << self.levels()) {
            return Err(Error::Config("input length must be divisible by 2^levels".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `(batch, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding shape")
}

/// U-Net style 1D denoiser shared by the autoencoder and the diffusion model.
///
/// Each block: convolution (stride 2 when downsampling), timestep embedding
/// added per channel, attribute embedding broadcast and concatenated, then
/// two residual blocks. Unconditional models keep the attribute layers but
/// feed a zero embedding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    params: ParamSet,
}

impl Trainable for Denoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

struct BlockCtx {
    temb: Var,
    attrs: Option<Var>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let k = config.kernel;
        let d = config.time_embed_dim;
        let w = &config.widths;
        let levels = config.levels();
        add_dense(&mut ps, &mut rng, "time", d, d);
        add_conv(&mut ps, &mut rng, "stem", 1, w[0], k);
        let block = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
            add_conv(ps, rng, &format!("{name}.conv"), cin, cout, k);
            add_dense(ps, rng, &format!("{name}.temb"), d, cout);
            add_dense(ps, rng, &format!("{name}.attr"), config.attr_len, cout);
            // conditioning starts as a no-op, so a conditional model begins
            // as the same function as its unconditional twin
            ps.insert(format!("{name}.attr.w"), Tensor::zeros(&[cout, config.attr_len]));
            add_conv(ps, rng, &format!("{name}.res0.c1"), 2 * cout, cout, k);
            add_conv(ps, rng, &format!("{name}.res0.c2"), cout, cout, k);
            add_conv(ps, rng, &format!("{name}.res0.skip"), 2 * cout, cout, 1);
            add_conv(ps, rng, &format!("{name}.res1.c1"), cout, cout, k);
            add_conv(ps, rng, &format!("{name}.res1.c2"), cout, cout, k);
        };
        let mut prev = w[0];
        for (i, &width) in w.iter().enumerate().take(levels) {
            block(&mut ps, &mut rng, &format!("down{i}"), prev, width);
            prev = width;
        }
        for j in 0..2 {
            block(&mut ps, &mut rng, &format!("mid{j}"), prev, prev);
        }
        for i in (0..levels).rev() {
            let skip = if i == 0 { w[0] } else { w[i - 1] };
            block(&mut ps, &mut rng, &format!("up{i}"), prev + skip, skip);
            prev = skip;
        }
        // zero-initialised output layer: the untrained model predicts 0
        ps.insert("out.w", Tensor::zeros(&[1, w[0], k]));
        ps.insert("out.b", Tensor::zeros(&[1]));
        Ok(Self { config, params: ps })
    }

    pub fn is_conditional(&self) -> bool {
        self.config.conditional
    }

    fn residual(&self, g: &mut Graph, name: &str, x: Var, project: bool) -> Result<Var> {
        let ps = &self.params;
        let h = g.relu(x);
        let h = conv(g, ps, &format!("{name}.c1"), h, 1)?;
        let h = g.relu(h);
        let h = conv(g, ps, &format!("{name}.c2"), h, 1)?;
        let skip = if project {
            conv(g, ps, &format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        g.add(h, skip)
    }

    fn block(&self, g: &mut Graph, ctx: &BlockCtx, name: &str, x: Var, stride: usize) -> Result<Var> {
        let ps = &self.params;
        let h = conv(g, ps, &format!("{name}.conv"), x, stride)?;
        let shape = g.value(h).shape().to_vec();
        let (b, c, len) = (shape[0], shape[1], shape[2]);
        let te = dense(g, ps, &format!("{name}.temb"), ctx.temb)?;
        let h = g.add_channel(h, te)?;
        let ae = match ctx.attrs {
            Some(a) => dense(g, ps, &format!("{name}.attr"), a)?,
            None => g.input(Tensor::zeros(&[b, c])),
        };
        let ae = g.broadcast_length(ae, len)?;
        let h = g.concat_channels(h, ae)?;
        let h = self.residual(g, &format!("{name}.res0"), h, true)?;
        self.residual(g, &format!("{name}.res1"), h, false)
    }

    /// Records a forward pass. `x` is `(batch, 1, L)`, `ts` holds one
    /// timestep per batch item and `attrs` is `(batch, attr_len)`.
    pub fn forward(&self, g: &mut Graph, x: Var, ts: &[usize], attrs: Option<&Tensor>) -> Result<Var> {
        let cfg = &self.config;
        check_series("denoise", g.value(x), cfg.input_len)?;
        let b = g.value(x).batch();
        if ts.len() != b {
            return Err(Error::shape("denoise", format!("{} timesteps for batch of {b}", ts.len())));
        }
        let attrs = match (cfg.conditional, attrs) {
            (true, None) => {
                return Err(Error::Config(
                    "conditional denoiser called without attributes".into(),
                ))
            }
            (true, Some(a)) => {
                if a.shape() != [b, cfg.attr_len] {
                    return Err(Error::shape(
                        "denoise",
                        format!("attributes {:?}, expected [{b}, {}]", a.shape(), cfg.attr_len),
                    ));
                }
                Some(g.input(a.clone()))
            }
            (false, _) => None,
        };
        let ts: Vec<usize> = match cfg.mode {
            DenoiserMode::Dae => vec![0; b],
            DenoiserMode::Dpm => ts.to_vec(),
        };
        let temb = g.input(timestep_embedding(&ts, cfg.time_embed_dim));
        let temb = dense(g, &self.params, "time", temb)?;
        let temb = g.relu(temb);
        let ctx = BlockCtx { temb, attrs };

        let levels = cfg.levels();
        let mut h = conv(g, &self.params, "stem", x, 1)?;
        let mut skips = vec![h];
        for i in 0..levels {
            h = self.block(g, &ctx, &format!("down{i}"), h, 2)?;
            skips.push(h);
        }
        for j in 0..2 {
            h = self.block(g, &ctx, &format!("mid{j}"), h, 1)?;
        }
        for i in (0..levels).rev() {
            h = g.upsample_nearest(h, 2)?;
            h = g.concat_channels(h, skips[i])?;
            h = self.block(g, &ctx, &format!("up{i}"), h, 1)?;
        }
        conv(g, &self.params, "out", h, 1)
    }

    /// One denoiser application: the reconstruction in DAE mode, the noise
    /// estimate in DPM mode.
    pub fn denoise_step(&self, x: &Tensor, t: usize, attrs: Option<&Tensor>) -> Result<Tensor> {
        if self.config.mode == DenoiserMode::Dpm && t == 0 {
            return Err(Error::Config("diffusion denoiser needs t >= 1".into()));
        }
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, xi, &vec![t; x.batch()], attrs)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        save_model(path, "denoiser", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = load_model::<DenoiserConfig>(path, "denoiser")?;
        config.validate()?;
        Ok(Self { config, params })
    }
}

// ---------------------------------------------------------------------------
// Downstream model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub input_len: usize,
    pub task: Task,
    /// Channels of each parallel branch (kernels 3, 5, 7) in a multi-scale block.
    pub branch_channels: usize,
    /// Output channels of the two convolution + pooling blocks.
    pub conv_channels: [usize; 2],
    pub fc: [usize; 2],
}

impl DownstreamConfig {
    pub fn new(input_len: usize, task: Task) -> Self {
        Self {
            input_len,
            task,
            branch_channels: 8,
            conv_channels: [32, 32],
            fc: [64, 32],
        }
    }
}

const BRANCH_KERNELS: [usize; 3] = [3, 5, 7];

/// Multi-scale CNN: two multi-scale blocks, two convolution/pooling blocks,
/// two fully connected layers and a task head.
#[derive(Debug, Clone)]
pub struct DownstreamModel {
    pub config: DownstreamConfig,
    params: ParamSet,
}

impl Trainable for DownstreamModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl DownstreamModel {
    pub fn new(config: DownstreamConfig, seed: u64) -> Result<Self> {
        if !config.input_len.is_multiple_of(4) {
            return Err(Error::Config("downstream input length must be divisible by 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let bc = config.branch_channels;
        let ms_out = bc * BRANCH_KERNELS.len();
        for (blk, cin) in [(0, 1), (1, ms_out)] {
            for k in BRANCH_KERNELS {
                add_conv(&mut ps, &mut rng, &format!("ms{blk}.k{k}"), cin, bc, k);
            }
        }
        let [c0, c1] = config.conv_channels;
        add_conv(&mut ps, &mut rng, "cb0.c0", ms_out, c0, 3);
        add_conv(&mut ps, &mut rng, "cb0.c1", c0, c0, 3);
        add_conv(&mut ps, &mut rng, "cb1.c0", c0, c1, 3);
        add_conv(&mut ps, &mut rng, "cb1.c1", c1, c1, 3);
        let flat = c1 * config.input_len / 4;
        add_dense(&mut ps, &mut rng, "fc0", flat, config.fc[0]);
        add_dense(&mut ps, &mut rng, "fc1", config.fc[0], config.fc[1]);
        add_dense(&mut ps, &mut rng, "head", config.fc[1], config.task.outputs());
        Ok(Self { config, params: ps })
    }

    fn multi_scale(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let mut out: Option<Var> = None;
        for k in BRANCH_KERNELS {
            let y = conv(g, &self.params, &format!("{name}.k{k}"), x, 1)?;
            out = Some(match out {
                None => y,
                Some(acc) => g.concat_channels(acc, y)?,
            });
        }
        Ok(g.relu(out.expect("three branches")))
    }

    /// Raw head outputs: logits for classification, values for regression.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_series("downstream", g.value(x), self.config.input_len)?;
        let ps = &self.params;
        let mut h = self.multi_scale(g, "ms0", x)?;
        h = self.multi_scale(g, "ms1", h)?;
        for blk in ["cb0", "cb1"] {
            h = conv(g, ps, &format!("{blk}.c0"), h, 1)?;
            h = g.relu(h);
            h = conv(g, ps, &format!("{blk}.c1"), h, 1)?;
            h = g.relu(h);
            h = g.maxpool1d(h, 2)?;
        }
        let shape = g.value(h).shape().to_vec();
        h = g.reshape(h, vec![shape[0], shape[1] * shape[2]])?;
        for fc in ["fc0", "fc1"] {
            h = dense(g, ps, fc, h)?;
            h = g.relu(h);
        }
        dense(g, ps, "head", h)
    }

    /// Task loss of a batch: softmax cross-entropy or mean squared error.
    pub fn loss(&self, g: &mut Graph, x: Var, targets: &[f64]) -> Result<Var> {
        let out = self.forward(g, x)?;
        match self.config.task {
            Task::Classification { .. } => {
                let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
                g.softmax_ce(out, &labels)
            }
            Task::Regression => {
                let t = g.input(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
                g.mse(out, t)
            }
        }
    }

    /// Class probabilities (rows sum to 1) or regression outputs.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = self.forward(&mut g, xi)?;
        let v = g.value(out);
        match self.config.task {
            Task::Classification { n_classes } => {
                Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), n_classes))
            }
            Task::Regression => Ok(v.clone()),
        }
    }

    /// Mean task loss without gradient tracking.
    pub fn evaluate_loss(&self, x: &Tensor, targets: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let l = self.loss(&mut g, xi, targets)?;
        Ok(g.value(l).data()[0])
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        save_model(path, "downstream", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = load_model(path, "downstream")?;
        Ok(Self { config, params })
    }
}
