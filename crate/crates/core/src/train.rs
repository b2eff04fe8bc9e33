//! Training loops, checkpoints, evaluation and inference.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{self, SamplePair, ValueRange};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricRecord, SummaryRow};
use crate::networks::{
    baseline_forward, baseline_logits, build_baseline_unet, build_discriminator, build_generator,
    discriminator_forward, generator_forward, DiscriminatorSpec, GeneratorSpec, NetOutput, NormStats, ParameterSet,
    RUNNING_MOMENTUM,
};
use crate::objectives::{
    adam_step, collect_grads, discriminator_loss, generator_adversarial_loss, generator_total_loss, l1_loss,
    pixel_bce_with_logits, AdamConfig, AdamState, LossBreakdown, DEFAULT_LAMBDA,
};
use crate::tensor::{Rng, Tape, Tensor};

const INIT_STREAM_G: u64 = 0;
const INIT_STREAM_D: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Pix2Pix,
    UnetBaseline,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Pix2Pix => 0,
            ModelKind::UnetBaseline => 1,
        }
    }

    /// Binarization threshold for this model's output range.
    pub fn threshold(self) -> f32 {
        match self {
            ModelKind::Pix2Pix => metrics::TANH_THRESHOLD,
            ModelKind::UnetBaseline => metrics::PROBABILITY_THRESHOLD,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Pix2Pix => "pix2pix",
            ModelKind::UnetBaseline => "unet",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pix2pix" => Ok(ModelKind::Pix2Pix),
            "unet" | "unet_baseline" => Ok(ModelKind::UnetBaseline),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?}, expected pix2pix or unet"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Pix2Pix,
            epochs: 100,
            batch_size: 1,
            lambda: DEFAULT_LAMBDA,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.adam.lr)));
        }
        self.generator.validate()?;
        if self.model == ModelKind::Pix2Pix {
            self.discriminator.validate()?;
            if self.discriminator.in_channels != self.generator.in_channels + self.generator.out_channels {
                return Err(Error::Spec("discriminator input channels must equal x plus y channels".into()));
            }
            if self.discriminator.logit_extent(self.generator.image_size).is_none() {
                return Err(Error::Spec(format!(
                    "discriminator with {} layers does not fit {}x{} images",
                    self.discriminator.n_layers, self.generator.image_size, self.generator.image_size
                )));
            }
        }
        Ok(())
    }
}

/// Trained networks with the specs needed to rebuild them.
#[derive(Clone, Debug, PartialEq)]
pub enum Networks {
    Pix2Pix { generator: ParameterSet, discriminator: ParameterSet, discriminator_spec: DiscriminatorSpec },
    UnetBaseline { network: ParameterSet },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Optimizer steps taken.
    pub step: u32,
    pub generator_spec: GeneratorSpec,
    pub networks: Networks,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        match self.networks {
            Networks::Pix2Pix { .. } => ModelKind::Pix2Pix,
            Networks::UnetBaseline { .. } => ModelKind::UnetBaseline,
        }
    }

    pub fn image_size(&self) -> usize {
        self.generator_spec.image_size
    }

    /// The network that maps an image to a mask prediction.
    pub fn segmenter(&self) -> &ParameterSet {
        match &self.networks {
            Networks::Pix2Pix { generator, .. } => generator,
            Networks::UnetBaseline { network } => network,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogEntry {
    Adversarial { step: u32, losses: LossBreakdown },
    Baseline { step: u32, bce: f32 },
}

impl LogEntry {
    pub fn step(&self) -> u32 {
        match self {
            LogEntry::Adversarial { step, .. } | LogEntry::Baseline { step, .. } => *step,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub model: ModelKind,
    pub entries: Vec<LogEntry>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }

    /// `step,d_loss,g_adv,g_l1,g_total` or `step,bce`; timing is not included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(match self.model {
            ModelKind::Pix2Pix => "step,d_loss,g_adv,g_l1,g_total\n",
            ModelKind::UnetBaseline => "step,bce\n",
        });
        for e in &self.entries {
            let _ = match e {
                LogEntry::Adversarial { step, losses: l } => {
                    writeln!(out, "{step},{},{},{},{}", l.d_loss_total, l.g_adv, l.g_l1, l.g_total)
                }
                LogEntry::Baseline { step, bce } => writeln!(out, "{step},{bce}"),
            };
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

fn absorb(params: &mut ParameterSet, out: &NetOutput<f32>) -> Result<()> {
    for (layer, m) in &out.moments {
        params.absorb_moments(layer, m, RUNNING_MOMENTUM)?;
    }
    Ok(())
}

fn scalar(tape: &Tape<f32>, v: crate::tensor::Var) -> f32 {
    tape.value(v).values()[0]
}

/// Alternating conditional-GAN optimizer state.
#[derive(Clone, Debug)]
pub struct Pix2PixTrainer {
    pub generator_spec: GeneratorSpec,
    pub discriminator_spec: DiscriminatorSpec,
    pub generator: ParameterSet,
    pub discriminator: ParameterSet,
    generator_adam: AdamState,
    discriminator_adam: AdamState,
    noise: Rng,
    lambda: f64,
    steps: u32,
}

impl Pix2PixTrainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        Ok(Self {
            generator_spec: config.generator,
            discriminator_spec: config.discriminator,
            generator: build_generator(&config.generator, &mut root.fork(INIT_STREAM_G))?,
            discriminator: build_discriminator(&config.discriminator, &mut root.fork(INIT_STREAM_D))?,
            generator_adam: AdamState::new(config.adam),
            discriminator_adam: AdamState::new(config.adam),
            noise: root.fork(NOISE_STREAM),
            lambda: config.lambda,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, x: &Tensor, y: &Tensor) -> Result<LossBreakdown> {
        self.step_with(x, y, true, true)
    }

    /// As [`step`](Self::step), with either update optionally skipped. Losses are
    /// computed either way.
    pub fn step_with(&mut self, x: &Tensor, y: &Tensor, update_d: bool, update_g: bool) -> Result<LossBreakdown> {
        let (gs, ds) = (self.generator_spec, self.discriminator_spec);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let gb = self.generator.bind(&mut tape, true);
        let g_out = generator_forward(&mut tape, &gs, &self.generator, &gb, xv, Some(&mut self.noise), NormStats::Batch)?;
        let fake = g_out.output;

        let fake_detached = tape.detach(fake)?;
        let db = self.discriminator.bind(&mut tape, true);
        let real_out = discriminator_forward(&mut tape, &ds, &self.discriminator, &db, xv, yv, NormStats::Batch)?;
        let fake_out =
            discriminator_forward(&mut tape, &ds, &self.discriminator, &db, xv, fake_detached, NormStats::Batch)?;
        let (d_real, d_fake, d_total) = discriminator_loss(&mut tape, real_out.output, fake_out.output)?;
        let (d_real, d_fake, d_total_value) = (scalar(&tape, d_real), scalar(&tape, d_fake), scalar(&tape, d_total));
        if !d_total_value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        if update_d {
            let mut grads = tape.backward(d_total)?;
            let d_grads = collect_grads(&db, &mut grads);
            adam_step(&mut self.discriminator, &d_grads, &mut self.discriminator_adam)?;
            absorb(&mut self.discriminator, &real_out)?;
            absorb(&mut self.discriminator, &fake_out)?;
        }

        let dc = self.discriminator.bind(&mut tape, false);
        let judged = discriminator_forward(&mut tape, &ds, &self.discriminator, &dc, xv, fake, NormStats::Batch)?;
        let g_adv = generator_adversarial_loss(&mut tape, judged.output)?;
        let g_l1 = l1_loss(&mut tape, yv, fake)?;
        let g_total = generator_total_loss(&mut tape, g_adv, g_l1, self.lambda)?;
        let losses = LossBreakdown {
            d_loss_real: d_real,
            d_loss_fake: d_fake,
            d_loss_total: d_total_value,
            g_adv: scalar(&tape, g_adv),
            g_l1: scalar(&tape, g_l1),
            g_total: scalar(&tape, g_total),
            lambda: self.lambda as f32,
        };
        if !losses.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        if update_g {
            let mut grads = tape.backward(g_total)?;
            let g_grads = collect_grads(&gb, &mut grads);
            adam_step(&mut self.generator, &g_grads, &mut self.generator_adam)?;
            absorb(&mut self.generator, &g_out)?;
        }
        self.steps += 1;
        Ok(losses)
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            step: self.steps,
            generator_spec: self.generator_spec,
            networks: Networks::Pix2Pix {
                generator: self.generator,
                discriminator: self.discriminator,
                discriminator_spec: self.discriminator_spec,
            },
        }
    }
}

/// Single-network optimizer state for the pixel cross-entropy baseline.
#[derive(Clone, Debug)]
pub struct BaselineTrainer {
    pub spec: GeneratorSpec,
    pub network: ParameterSet,
    adam: AdamState,
    steps: u32,
}

impl BaselineTrainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        Ok(Self {
            spec: config.generator,
            network: build_baseline_unet(&config.generator, &mut root.fork(INIT_STREAM_G))?,
            adam: AdamState::new(config.adam),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One update against a `{0,1}` mask batch; returns the loss before the update.
    pub fn step(&mut self, x: &Tensor, mask: &Tensor) -> Result<f32> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mv = tape.constant(mask.clone());
        let b = self.network.bind(&mut tape, true);
        let out = baseline_logits(&mut tape, &self.spec, &self.network, &b, xv, NormStats::Batch)?;
        let loss = pixel_bce_with_logits(&mut tape, out.output, mv)?;
        let value = scalar(&tape, loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        let mut grads = tape.backward(loss)?;
        let g = collect_grads(&b, &mut grads);
        adam_step(&mut self.network, &g, &mut self.adam)?;
        absorb(&mut self.network, &out)?;
        self.steps += 1;
        Ok(value)
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            step: self.steps,
            generator_spec: self.spec,
            networks: Networks::UnetBaseline { network: self.network },
        }
    }
}

fn check_pairs(pairs: &[SamplePair], size: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Empty("train set"));
    }
    if let Some(p) = pairs.iter().find(|p| p.size() != size) {
        return Err(Error::Spec(format!("sample {} is {}x{}, network expects {size}x{size}", p.id, p.size(), p.size())));
    }
    Ok(())
}

/// Calls `f` once per batch over `epochs` passes, shuffling per epoch when enabled.
fn run_epochs(
    config: &TrainConfig,
    pairs: &[SamplePair],
    mut f: impl FnMut(&[&SamplePair]) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut shuffle = Rng::new(config.seed).fork(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut times = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        if config.shuffle {
            shuffle.shuffle(&mut order);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            f(&batch)?;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(times)
}

fn stack(batch: &[&SamplePair], pick: impl Fn(&SamplePair) -> &Tensor) -> Result<Tensor> {
    if let [one] = batch {
        return Ok(pick(one).clone());
    }
    let parts: Vec<&Tensor> = batch.iter().map(|p| pick(p)).collect();
    Tensor::stack_batch(&parts)
}

pub fn train_pix2pix(config: &TrainConfig, pairs: &[SamplePair]) -> Result<TrainOutcome> {
    let mut trainer = Pix2PixTrainer::new(config)?;
    check_pairs(pairs, config.generator.image_size)?;
    let mut entries = Vec::new();
    let epoch_seconds = run_epochs(config, pairs, |batch| {
        let step = trainer.steps();
        let losses = trainer.step(&stack(batch, |p| &p.input)?, &stack(batch, |p| &p.target)?)?;
        entries.push(LogEntry::Adversarial { step, losses });
        Ok(())
    })?;
    Ok(TrainOutcome {
        checkpoint: trainer.into_checkpoint(),
        log: TrainLog { model: ModelKind::Pix2Pix, entries, epoch_seconds },
    })
}

pub fn train_baseline(config: &TrainConfig, pairs: &[SamplePair]) -> Result<TrainOutcome> {
    let mut trainer = BaselineTrainer::new(config)?;
    check_pairs(pairs, config.generator.image_size)?;
    let mut entries = Vec::new();
    let epoch_seconds = run_epochs(config, pairs, |batch| {
        let step = trainer.steps();
        let bce = trainer.step(&stack(batch, |p| &p.input)?, &stack(batch, |p| &p.mask)?)?;
        entries.push(LogEntry::Baseline { step, bce });
        Ok(())
    })?;
    Ok(TrainOutcome {
        checkpoint: trainer.into_checkpoint(),
        log: TrainLog { model: ModelKind::UnetBaseline, entries, epoch_seconds },
    })
}

pub fn train(config: &TrainConfig, pairs: &[SamplePair]) -> Result<TrainOutcome> {
    match config.model {
        ModelKind::Pix2Pix => train_pix2pix(config, pairs),
        ModelKind::UnetBaseline => train_baseline(config, pairs),
    }
}

/// How a checkpoint is run at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Apply the generator's dropout noise.
    pub noise: bool,
    /// Seed for the noise; image `k` draws from stream `k`.
    pub noise_seed: u64,
    pub stats: NormStats,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { noise: false, noise_seed: 0, stats: NormStats::Batch }
    }
}

/// Raw model output for one `[1,C,S,S]` input: tanh range for the generator,
/// probabilities for the baseline.
pub fn predict(ckpt: &Checkpoint, input: &Tensor, opts: &EvalOptions, index: u64) -> Result<Tensor> {
    let size = ckpt.image_size();
    let d = input.dims();
    if d.len() != 4 || d[2] != size || d[3] != size {
        return Err(Error::Spec(format!("input dims {d:?} do not match checkpoint image size {size}")));
    }
    let spec = ckpt.generator_spec;
    let params = ckpt.segmenter();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let out = match ckpt.kind() {
        ModelKind::Pix2Pix => {
            let mut rng = Rng::new(opts.noise_seed).fork(index);
            let noise = if opts.noise { Some(&mut rng) } else { None };
            generator_forward(&mut tape, &spec, params, &b, x, noise, opts.stats)?
        }
        ModelKind::UnetBaseline => baseline_forward(&mut tape, &spec, params, &b, x, opts.stats)?,
    };
    Ok(tape.value(out.output).clone())
}

pub fn predict_mask(ckpt: &Checkpoint, input: &Tensor, opts: &EvalOptions, index: u64) -> Result<Tensor> {
    Ok(metrics::binarize(&predict(ckpt, input, opts, index)?, ckpt.kind().threshold()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub records: Vec<MetricRecord>,
    pub summaries: Vec<SummaryRow>,
    pub seconds: f64,
}

/// Scores `predict` (returning a `{0,1}` mask per pair) against every pair's mask.
pub fn evaluate_with(
    pairs: &[SamplePair],
    predict: impl Fn(usize, &SamplePair) -> Result<Tensor> + Sync,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let start = Instant::now();
    let records = pairs
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let pred = predict(k, p)?;
            MetricRecord::from_counts(p.id.clone(), &metrics::confusion(&pred, &p.mask)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(Evaluation { summaries: metrics::summarize_all(&records)?, records, seconds })
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, pairs: &[SamplePair], opts: &EvalOptions) -> Result<Evaluation> {
    evaluate_with(pairs, |k, p| predict_mask(ckpt, &p.input, opts, k as u64))
}

/// Segments the image at `input`, writing a 0/255 mask to `output` and, when
/// given, the pre-threshold output to `raw_output`.
pub fn infer(
    ckpt: &Checkpoint,
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    raw_output: Option<&Path>,
    opts: &EvalOptions,
) -> Result<Tensor> {
    let x = data::load_image(input, ckpt.image_size())?;
    let raw = predict(ckpt, &x, opts, 0)?;
    let mask = metrics::binarize(&raw, ckpt.kind().threshold());
    data::save_image(&mask, output, ValueRange::Unit)?;
    if let Some(path) = raw_output {
        let range = match ckpt.kind() {
            ModelKind::Pix2Pix => ValueRange::Signed,
            ModelKind::UnetBaseline => ValueRange::Unit,
        };
        data::save_image(&raw, path, range)?;
    }
    Ok(mask)
}

/// Writes `input | prediction | ground truth` strips, one PNG per pair.
pub fn write_samples(ckpt: &Checkpoint, pairs: &[SamplePair], dir: impl AsRef<Path>, opts: &EvalOptions) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pairs.par_iter().enumerate().try_for_each(|(k, p)| {
        let pred = predict_mask(ckpt, &p.input, opts, k as u64)?;
        data::save_strip(
            &[(&p.input, ValueRange::Signed), (&pred, ValueRange::Unit), (&p.mask, ValueRange::Unit)],
            dir.join(format!("{}.png", p.id)),
        )
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASEG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::MalformedCheckpoint(format!("{what} {v} exceeds u32")))
}

fn put_params(out: &mut Vec<u8>, prefix: &str, params: &ParameterSet) -> Result<()> {
    for p in params.iter() {
        let name = format!("{prefix}{}", p.name);
        let len = u16::try_from(name.len()).map_err(|_| Error::MalformedCheckpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.tensor.dims().len() as u8);
        for &d in p.tensor.dims() {
            put_u32(out, to_u32(d, "extent")?);
        }
        for v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Serializes `ckpt`: magic, version, kind byte, spec words, then named tensors.
/// Spec words, all u32 LE: step, image_size, in_channels, out_channels,
/// base_width, depth, dropout_p bits, and for pix2pix the discriminator's
/// in_channels, base_width and n_layers. Optimizer state is not stored.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let g = &ckpt.generator_spec;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.push(ckpt.kind().code());
    put_u32(&mut out, ckpt.step);
    for (v, what) in [
        (g.image_size, "image_size"),
        (g.in_channels, "in_channels"),
        (g.out_channels, "out_channels"),
        (g.base_width, "base_width"),
        (g.depth, "depth"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    put_u32(&mut out, g.dropout_p.to_bits());
    match &ckpt.networks {
        Networks::Pix2Pix { generator, discriminator, discriminator_spec: d } => {
            for (v, what) in [(d.in_channels, "in_channels"), (d.base_width, "base_width"), (d.n_layers, "n_layers")] {
                put_u32(&mut out, to_u32(v, what)?);
            }
            put_u32(&mut out, to_u32(generator.len() + discriminator.len(), "tensor count")?);
            put_params(&mut out, "G.", generator)?;
            put_params(&mut out, "D.", discriminator)?;
        }
        Networks::UnetBaseline { network } => {
            put_u32(&mut out, to_u32(network.len(), "tensor count")?);
            put_params(&mut out, "U.", network)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(context.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("four bytes")))
    }
}

fn fill_params(reader: &mut Reader<'_>, prefix: &str, params: &mut ParameterSet, count: usize) -> Result<()> {
    let mut seen = 0;
    for k in 0..count {
        let slot = format!("tensor #{k}");
        let len = reader.u16(&slot)? as usize;
        let name = std::str::from_utf8(reader.take(len, &slot)?)
            .map_err(|_| Error::MalformedCheckpoint(format!("{slot}: name is not UTF-8")))?
            .to_string();
        let local = name
            .strip_prefix(prefix)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor {name} lacks prefix {prefix}")))?;
        let rank = reader.u8(&name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(reader.u32(&name)? as usize);
        }
        let target = params
            .get_mut(local)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("unexpected tensor {name}")))?;
        if target.dims() != dims.as_slice() {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor {name} has dims {dims:?}, spec implies {:?}",
                target.dims()
            )));
        }
        let payload = reader.take(target.len() * 4, &name)?;
        for (v, chunk) in target.values_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
        }
        seen += 1;
    }
    if seen != params.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{prefix} network has {} tensors, file provides {seen}",
            params.len()
        )));
    }
    Ok(())
}

fn usize_word(reader: &mut Reader<'_>) -> Result<usize> {
    Ok(reader.u32("spec block")? as usize)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = match r.u8("header")? {
        0 => ModelKind::Pix2Pix,
        1 => ModelKind::UnetBaseline,
        other => return Err(Error::MalformedCheckpoint(format!("unknown model kind {other}"))),
    };
    let step = r.u32("spec block")?;
    let image_size = usize_word(&mut r)?;
    let in_channels = usize_word(&mut r)?;
    let out_channels = usize_word(&mut r)?;
    let base_width = usize_word(&mut r)?;
    let depth = usize_word(&mut r)?;
    let dropout_p = f32::from_bits(r.u32("spec block")?);
    let generator_spec = GeneratorSpec { in_channels, out_channels, base_width, depth, dropout_p, image_size };
    // Structure comes from the spec; values are overwritten from the file.
    let mut scratch = Rng::new(0);
    let networks = match kind {
        ModelKind::Pix2Pix => {
            let discriminator_spec = DiscriminatorSpec {
                in_channels: usize_word(&mut r)?,
                base_width: usize_word(&mut r)?,
                n_layers: usize_word(&mut r)?,
            };
            let count = r.u32("header")? as usize;
            let mut generator = build_generator(&generator_spec, &mut scratch)?;
            let mut discriminator = build_discriminator(&discriminator_spec, &mut scratch)?;
            let g_count = generator.len().min(count);
            fill_params(&mut r, "G.", &mut generator, g_count)?;
            fill_params(&mut r, "D.", &mut discriminator, count - g_count)?;
            Networks::Pix2Pix { generator, discriminator, discriminator_spec }
        }
        ModelKind::UnetBaseline => {
            let count = r.u32("header")? as usize;
            let mut network = build_baseline_unet(&generator_spec, &mut scratch)?;
            fill_params(&mut r, "U.", &mut network, count)?;
            Networks::UnetBaseline { network }
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { step, generator_spec, networks })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
