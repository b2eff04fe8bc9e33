//! Generator, patch discriminator and baseline U-Net.
//!
//! The generator is a U-Net: `depth` stride-2 convolutions down, `depth`
//! stride-2 transposed convolutions up, with each encoder level concatenated
//! onto the decoder level of matching resolution. The baseline shares that
//! topology and differs only in its head (logits/sigmoid instead of tanh) and
//! in never applying dropout.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvGeometry, NormMode, Rng, Scalar, Tape, Tensor, Var};

pub use crate::tensor::Moments;

const KERNEL: usize = 4;
const DOWN: ConvGeometry = ConvGeometry::new(2, 1);
const PATCH_OUT: ConvGeometry = ConvGeometry::new(1, 1);
const LEAK: f64 = 0.2;
const INIT_STD: f64 = 0.02;
/// Weight of the newest batch in running normalization statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;
/// Decoder blocks nearest the bottleneck that apply dropout noise.
const NOISY_DECODER_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_p: f32,
    pub image_size: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_width: 64,
            depth: 8,
            dropout_p: 0.5,
            image_size: 256,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Spec(format!("depth {} < 2", self.depth)));
        }
        if self.base_width < 4 {
            return Err(Error::Spec(format!("base_width {} < 4", self.base_width)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Spec("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Spec(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        let scale = 1usize
            .checked_shl(self.depth as u32)
            .filter(|&s| s <= self.image_size)
            .ok_or_else(|| {
                Error::Spec(format!(
                    "image_size {} too small for depth {}",
                    self.image_size, self.depth
                ))
            })?;
        if self.image_size % scale != 0 {
            return Err(Error::Spec(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }

    /// Output channels of encoder level `j` (0 = outermost).
    pub fn encoder_channels(&self, j: usize) -> usize {
        self.base_width << j.min(3)
    }

    /// (input, output) channels of decoder level `i` (0 = innermost).
    pub fn decoder_channels(&self, i: usize) -> (usize, usize) {
        let skip = self.encoder_channels(self.depth - 1 - i);
        let input = if i == 0 {
            skip
        } else {
            skip + self.decoder_channels(i - 1).1
        };
        let output = if i + 1 < self.depth {
            self.encoder_channels(self.depth - 2 - i)
        } else {
            self.out_channels
        };
        (input, output)
    }

    fn noisy_decoder_block(&self, i: usize) -> bool {
        i < NOISY_DECODER_BLOCKS.min(self.depth - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_width: 64,
            n_layers: 3,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Spec("n_layers must be >= 1".into()));
        }
        if self.base_width < 1 || self.in_channels < 1 {
            return Err(Error::Spec("discriminator widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_channels(&self, j: usize) -> usize {
        self.base_width << j.min(3)
    }

    /// Spatial extent of the logit map for a square input of side `size`.
    pub fn logit_extent(&self, size: usize) -> Option<usize> {
        let mut s = size;
        for _ in 0..self.n_layers {
            s = DOWN.conv_extent(s, KERNEL)?;
        }
        PATCH_OUT.conv_extent(s, KERNEL)
    }
}

/// Whether a parameter is updated by the optimizer or is a normalization
/// buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named tensors of one network in construction order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T: Scalar = f32> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Parameter { name, kind, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter().filter(|p| p.kind == ParamKind::Trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every trainable tensor on `tape`: as gradient-tracked leaves
    /// when `track` is set, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = self
            .trainable()
            .map(|p| {
                let v = if track {
                    tape.leaf(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                };
                (p.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Folds batch statistics into the running averages of layer `prefix`.
    pub fn absorb_moments(&mut self, prefix: &str, m: &Moments<T>, momentum: f64) -> Result<()> {
        let unbias = if m.count > 1 {
            m.count as f64 / (m.count - 1) as f64
        } else {
            1.0
        };
        let blend = |old: &mut T, new: f64| {
            *old = T::from_f64_lossy((1.0 - momentum) * old.as_f64() + momentum * new);
        };
        let mean = self
            .get_mut(&format!("{prefix}.running_mean"))
            .ok_or_else(|| Error::InvalidArgument(format!("{prefix} has no running stats")))?;
        for (o, n) in mean.values_mut().iter_mut().zip(&m.mean) {
            blend(o, n.as_f64());
        }
        let var = self
            .get_mut(&format!("{prefix}.running_var"))
            .ok_or_else(|| Error::InvalidArgument(format!("{prefix} has no running stats")))?;
        for (o, n) in var.values_mut().iter_mut().zip(&m.var) {
            blend(o, n.as_f64() * unbias);
        }
        Ok(())
    }
}

/// Tape handles of a [`ParameterSet`]'s trainable tensors.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn new(vars: Vec<(String, Var)>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Statistics used by normalization layers during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    /// Statistics of the current batch (training, and per-image inference).
    Batch,
    /// Running averages stored in the parameter set.
    Running,
}

pub struct NetOutput<T: Scalar> {
    pub output: Var,
    /// Batch statistics per normalized layer, in [`NormStats::Batch`] mode.
    pub moments: Vec<(String, Moments<T>)>,
}

fn add_conv(
    set: &mut ParameterSet,
    rng: &mut Rng,
    name: &str,
    dims: [usize; 4],
    bias_len: usize,
    norm: bool,
) -> Result<()> {
    set.insert(
        format!("{name}.weight"),
        ParamKind::Trainable,
        Tensor::gaussian(&dims, 0.0, INIT_STD, rng)?,
    )?;
    set.insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[bias_len])?)?;
    if norm {
        set.insert(
            format!("{name}.gain"),
            ParamKind::Trainable,
            Tensor::gaussian(&[bias_len], 1.0, INIT_STD, rng)?,
        )?;
        set.insert(format!("{name}.shift"), ParamKind::Trainable, Tensor::zeros(&[bias_len])?)?;
        set.insert(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[bias_len])?)?;
        set.insert(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            Tensor::filled(&[bias_len], 1.0)?,
        )?;
    }
    Ok(())
}

/// Parameters of the U-Net generator. Also used for the baseline, whose
/// topology is identical.
pub fn build_generator(spec: &GeneratorSpec, rng: &mut Rng) -> Result<ParameterSet> {
    spec.validate()?;
    let mut set = ParameterSet::new();
    let mut in_c = spec.in_channels;
    for j in 0..spec.depth {
        let out_c = spec.encoder_channels(j);
        add_conv(&mut set, rng, &format!("enc{j}"), [out_c, in_c, KERNEL, KERNEL], out_c, j > 0)?;
        in_c = out_c;
    }
    for i in 0..spec.depth {
        let (in_c, out_c) = spec.decoder_channels(i);
        let last = i + 1 == spec.depth;
        add_conv(&mut set, rng, &format!("dec{i}"), [in_c, out_c, KERNEL, KERNEL], out_c, !last)?;
    }
    Ok(set)
}

pub fn build_baseline_unet(spec: &GeneratorSpec, rng: &mut Rng) -> Result<ParameterSet> {
    build_generator(spec, rng)
}

pub fn build_discriminator(spec: &DiscriminatorSpec, rng: &mut Rng) -> Result<ParameterSet> {
    spec.validate()?;
    let mut set = ParameterSet::new();
    let mut in_c = spec.in_channels;
    for j in 0..spec.n_layers {
        let out_c = spec.layer_channels(j);
        add_conv(&mut set, rng, &format!("layer{j}"), [out_c, in_c, KERNEL, KERNEL], out_c, j > 0)?;
        in_c = out_c;
    }
    add_conv(&mut set, rng, "out", [1, in_c, KERNEL, KERNEL], 1, false)?;
    Ok(set)
}

struct Ctx<'a, T: Scalar> {
    params: &'a ParameterSet<T>,
    bound: &'a Bound,
    stats: NormStats,
    moments: Vec<(String, Moments<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&self, tape: &mut Tape<T>, name: &str, x: Var, transpose: bool, geom: ConvGeometry) -> Result<Var> {
        let w = self.bound.var(&format!("{name}.weight"))?;
        let b = self.bound.var(&format!("{name}.bias"))?;
        if transpose {
            tape.conv_transpose2d(x, w, Some(b), geom)
        } else {
            tape.conv2d(x, w, Some(b), geom)
        }
    }

    fn norm(&mut self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let gain = self.bound.var(&format!("{name}.gain"))?;
        let shift = self.bound.var(&format!("{name}.shift"))?;
        let mode = match self.stats {
            NormStats::Batch => NormMode::Batch,
            NormStats::Running => NormMode::Running {
                mean: self.params.require(&format!("{name}.running_mean"))?.values(),
                var: self.params.require(&format!("{name}.running_var"))?.values(),
            },
        };
        let (y, moments) = tape.channel_norm(x, gain, shift, mode)?;
        if let Some(m) = moments {
            self.moments.push((name.to_string(), m));
        }
        Ok(y)
    }
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var, channels: usize, size: usize) -> Result<()> {
    let (_, c, h, w) = tape.try_value(x)?.nchw()?;
    if (c, h, w) != (channels, size, size) {
        return Err(Error::Shape(format!(
            "network expects [N, {channels}, {size}, {size}] input, got {:?}",
            tape.value(x).dims()
        )));
    }
    Ok(())
}

/// Which final activation closes the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Tanh,
    Logits,
}

#[allow(clippy::too_many_arguments)]
fn unet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &GeneratorSpec,
    params: &ParameterSet<T>,
    bound: &Bound,
    x: Var,
    mut noise: Option<&mut Rng>,
    stats: NormStats,
    head: Head,
) -> Result<NetOutput<T>> {
    spec.validate()?;
    check_input(tape, x, spec.in_channels, spec.image_size)?;
    let mut ctx = Ctx {
        params,
        bound,
        stats,
        moments: Vec::new(),
    };
    let mut skips = Vec::with_capacity(spec.depth);
    let mut h = x;
    for j in 0..spec.depth {
        let name = format!("enc{j}");
        h = ctx.conv(tape, &name, h, false, DOWN)?;
        if j > 0 {
            h = ctx.norm(tape, &name, h)?;
        }
        h = tape.activation(Activation::LeakyRelu(LEAK), h)?;
        skips.push(h);
    }
    for i in 0..spec.depth {
        let name = format!("dec{i}");
        let skip = skips[spec.depth - 1 - i];
        let input = if i == 0 { skip } else { tape.concat_channels(&[h, skip])? };
        h = ctx.conv(tape, &name, input, true, DOWN)?;
        if i + 1 < spec.depth {
            h = ctx.norm(tape, &name, h)?;
            if let Some(rng) = noise.as_deref_mut() {
                if spec.noisy_decoder_block(i) {
                    h = tape.dropout(h, spec.dropout_p as f64, rng, true)?;
                }
            }
            h = tape.activation(Activation::Relu, h)?;
        } else if head == Head::Tanh {
            h = tape.activation(Activation::Tanh, h)?;
        }
    }
    Ok(NetOutput {
        output: h,
        moments: ctx.moments,
    })
}

/// Translator forward pass `G(x, z)`; `z` is realized as dropout drawn from
/// `noise` when given. Output has the input's dims, values in (-1, 1).
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &GeneratorSpec,
    params: &ParameterSet<T>,
    bound: &Bound,
    x: Var,
    noise: Option<&mut Rng>,
    stats: NormStats,
) -> Result<NetOutput<T>> {
    unet_forward(tape, spec, params, bound, x, noise, stats, Head::Tanh)
}

/// Baseline pre-sigmoid logits.
pub fn baseline_logits<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &GeneratorSpec,
    params: &ParameterSet<T>,
    bound: &Bound,
    x: Var,
    stats: NormStats,
) -> Result<NetOutput<T>> {
    unet_forward(tape, spec, params, bound, x, None, stats, Head::Logits)
}

/// Baseline foreground probabilities in (0, 1).
pub fn baseline_forward<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &GeneratorSpec,
    params: &ParameterSet<T>,
    bound: &Bound,
    x: Var,
    stats: NormStats,
) -> Result<NetOutput<T>> {
    let mut out = baseline_logits(tape, spec, params, bound, x, stats)?;
    out.output = tape.activation(Activation::Sigmoid, out.output)?;
    Ok(out)
}

/// Patch discriminator `D(x, y)`: channels of `x` then `y`, returning a map of
/// logits (no sigmoid).
#[allow(clippy::too_many_arguments)]
pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &DiscriminatorSpec,
    params: &ParameterSet<T>,
    bound: &Bound,
    x: Var,
    y: Var,
    stats: NormStats,
) -> Result<NetOutput<T>> {
    spec.validate()?;
    let (xn, xc, xh, xw) = tape.try_value(x)?.nchw()?;
    let (yn, yc, yh, yw) = tape.try_value(y)?.nchw()?;
    if (xn, xh, xw) != (yn, yh, yw) {
        return Err(Error::DimsMismatch {
            op: "discriminator_forward",
            left: tape.value(x).dims().to_vec(),
            right: tape.value(y).dims().to_vec(),
        });
    }
    if xc + yc != spec.in_channels {
        return Err(Error::Shape(format!(
            "discriminator expects {} channels, got {xc} + {yc}",
            spec.in_channels
        )));
    }
    let mut ctx = Ctx {
        params,
        bound,
        stats,
        moments: Vec::new(),
    };
    let mut h = tape.concat_channels(&[x, y])?;
    for j in 0..spec.n_layers {
        let name = format!("layer{j}");
        h = ctx.conv(tape, &name, h, false, DOWN)?;
        if j > 0 {
            h = ctx.norm(tape, &name, h)?;
        }
        h = tape.activation(Activation::LeakyRelu(LEAK), h)?;
    }
    let out = ctx.conv(tape, "out", h, false, PATCH_OUT)?;
    Ok(NetOutput {
        output: out,
        moments: ctx.moments,
    })
}
