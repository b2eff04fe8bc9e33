//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Each recorded operation stores its output value, the handles of its inputs
//! and whatever forward context its backward rule needs. Inputs always precede
//! outputs, so a single reverse sweep visits every node after all of its
//! consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Dims4};
use super::{Rng, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Variance stabilizer for channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// `floor((len + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
    pub fn conv_extent(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (self.stride > 0 && padded >= k).then(|| (padded - k) / self.stride + 1)
    }

    /// `(len - 1) s - 2p + k`, or `None` when that is not positive.
    pub fn transpose_extent(&self, len: usize, k: usize) -> Option<usize> {
        let full = (len - 1) * self.stride + k;
        (self.stride > 0 && full > 2 * self.padding).then(|| full - 2 * self.padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
}

/// Which statistics a channel normalization uses.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T: Scalar> {
    /// Per-channel mean and variance of the current batch over the batch and
    /// spatial axes.
    Batch,
    /// Fixed statistics, typically running averages accumulated in training.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics produced by a [`NormMode::Batch`] pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    Abs(Var),
    Log(Var),
    Neg(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Norm {
        input: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Act(Activation, Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat(Vec<Var>),
    Mean(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_dims(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch {
            op,
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    Ok(())
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> Result<Dims4> {
    let (n, c, h, w) = t.nchw()?;
    Ok(Dims4 { n, c, h, w })
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.index).ok_or(Error::NotOnTape)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].tracked)
    }

    /// Records a value whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that is treated as a constant by `backward`.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("Var from a different tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let values: Vec<T> = if bv.len() == 1 {
            let s = bv.values()[0];
            av.values().iter().map(|&x| f(x, s)).collect()
        } else {
            same_dims(op, av, bv)?;
            av.values()
                .iter()
                .zip(bv.values())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let out = Tensor::new(av.dims(), values)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, make(a, b), tracked))
    }

    /// Elementwise `a + b`; `b` may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.node(a)?.value.map(f);
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, op, tracked))
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, |x| x * s, Op::ScalarMul(a, s))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::abs, Op::Abs(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.node(a)?.value.values().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad:?}")));
        }
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let f: Box<dyn Fn(T) -> T> = match kind {
            Activation::Relu => Box::new(|x: T| x.max(T::zero())),
            Activation::LeakyRelu(alpha) => {
                let alpha = T::from_f64_lossy(alpha);
                Box::new(move |x: T| if x > T::zero() { x } else { alpha * x })
            }
            Activation::Tanh => Box::new(T::tanh),
            Activation::Sigmoid => Box::new(sigmoid),
            Activation::Softplus => Box::new(softplus),
        };
        self.unary(a, f, Op::Act(kind, a))
    }

    /// Cross-correlation with kernel dims `[out_ch, in_ch, kh, kw]` and
    /// optional bias `[out_ch]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let x = &self.node(input)?.value;
        let k = &self.node(kernel)?.value;
        let xd = dims4(x)?;
        let (oc, ic, kh, kw) = k.nchw()?;
        if ic != xd.c {
            return Err(Error::Shape(format!(
                "conv2d: kernel expects {ic} input channels, input has {}",
                xd.c
            )));
        }
        let (oh, ow) = match (geom.conv_extent(xd.h, kh), geom.conv_extent(xd.w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: kernel {kh}x{kw} larger than padded input {}x{} (padding {})",
                    xd.h, xd.w, geom.padding
                )))
            }
        };
        let b = self.bias_values(bias, oc)?;
        let out = kernels::gather(
            x.values(),
            xd,
            k.values(),
            oc,
            (kh, kw),
            geom.stride,
            geom.padding,
            (oh, ow),
            b,
        );
        let out = Tensor::new(&[xd.n, oc, oh, ow], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            tracked,
        ))
    }

    /// Transposed convolution with kernel dims `[in_ch, out_ch, kh, kw]`; the
    /// adjoint of [`Tape::conv2d`] under the same kernel and geometry.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let x = &self.node(input)?.value;
        let k = &self.node(kernel)?.value;
        let xd = dims4(x)?;
        let (ic, oc, kh, kw) = k.nchw()?;
        if ic != xd.c {
            return Err(Error::Shape(format!(
                "conv_transpose2d: kernel expects {ic} input channels, input has {}",
                xd.c
            )));
        }
        let (oh, ow) = match (
            geom.transpose_extent(xd.h, kh),
            geom.transpose_extent(xd.w, kw),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Shape(format!(
                    "conv_transpose2d: non-positive output extent for input {}x{}, kernel {kh}x{kw}, {geom:?}",
                    xd.h, xd.w
                )))
            }
        };
        let b = self.bias_values(bias, oc)?;
        let out = kernels::scatter(
            x.values(),
            xd,
            k.values(),
            oc,
            (kh, kw),
            geom.stride,
            geom.padding,
            (oh, ow),
            b,
        );
        let out = Tensor::new(&[xd.n, oc, oh, ow], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            tracked,
        ))
    }

    fn bias_values(&self, bias: Option<Var>, channels: usize) -> Result<Option<&[T]>> {
        let Some(b) = bias else { return Ok(None) };
        let b = &self.node(b)?.value;
        if b.len() != channels {
            return Err(Error::Shape(format!(
                "bias has {} values for {channels} output channels",
                b.len()
            )));
        }
        Ok(Some(b.values()))
    }

    /// Per-channel normalization followed by `gain * x + shift`.
    ///
    /// In [`NormMode::Batch`] the statistics are returned so callers can fold
    /// them into running averages.
    pub fn channel_norm(
        &mut self,
        input: Var,
        gain: Var,
        shift: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<Moments<T>>)> {
        let x = &self.node(input)?.value;
        let d = dims4(x)?;
        let g = self.node(gain)?.value.values();
        let s = self.node(shift)?.value.values();
        if g.len() != d.c || s.len() != d.c {
            return Err(Error::Shape(format!(
                "channel_norm: gain/shift lengths {}/{} for {} channels",
                g.len(),
                s.len(),
                d.c
            )));
        }
        let count = d.n * d.plane();
        let (mean, var, moments) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0f64; d.c];
                let mut var = vec![0.0f64; d.c];
                for c in 0..d.c {
                    let planes = || {
                        (0..d.n).flat_map(move |n| {
                            x.values()[(n * d.c + c) * d.plane()..][..d.plane()].iter()
                        })
                    };
                    let m = planes().map(|v| v.as_f64()).sum::<f64>() / count as f64;
                    let v = planes()
                        .map(|v| {
                            let e = v.as_f64() - m;
                            e * e
                        })
                        .sum::<f64>()
                        / count as f64;
                    mean[c] = m;
                    var[c] = v;
                }
                let moments = Moments {
                    mean: mean.iter().map(|&v| T::from_f64_lossy(v)).collect(),
                    var: var.iter().map(|&v| T::from_f64_lossy(v)).collect(),
                    count,
                };
                (mean, var, Some(moments))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != d.c || var.len() != d.c {
                    return Err(Error::Shape(format!(
                        "channel_norm: running stats of length {}/{} for {} channels",
                        mean.len(),
                        var.len(),
                        d.c
                    )));
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v + NORM_EPS).sqrt()))
            .collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = (n * d.c + c) * d.plane();
                let m = T::from_f64_lossy(mean[c]);
                for i in base..base + d.plane() {
                    let h = (x.values()[i] - m) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * g[c] + s[c];
                }
            }
        }
        let out = Tensor::new(x.dims(), out)?;
        let tracked = self.tracked(&[input, gain, shift]);
        let var = self.push(
            out,
            Op::Norm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
                batch: moments.is_some(),
            },
            tracked,
        );
        Ok((var, moments))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Identity when inactive or `p == 0`.
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut Rng, active: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let x = &self.node(input)?.value;
        if !active || p == 0.0 {
            return Ok(input);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { scale })
            .collect();
        let values = x.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.dims(), values)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, Op::Dropout { input, mask }, tracked))
    }

    /// Concatenates 4-D values along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_channels inputs"))?;
        if parts.len() == 1 {
            self.node(*first)?;
            return Ok(*first);
        }
        let (n, _, h, w) = self.node(*first)?.value.nchw()?;
        let mut total_c = 0;
        for &p in parts {
            let v = &self.node(p)?.value;
            let (pn, pc, ph, pw) = v.nchw()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::DimsMismatch {
                    op: "concat_channels",
                    left: self.node(*first)?.value.dims().to_vec(),
                    right: v.dims().to_vec(),
                });
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut values = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let v = &self.nodes[p.index].value;
                let pc = v.dims()[1];
                values.extend_from_slice(&v.values()[b * pc * plane..][..pc * plane]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], values)?;
        let tracked = self.tracked(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), tracked))
    }

    /// Arithmetic mean of all elements, as a single-element tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = &self.node(a)?.value;
        let m = x.values().iter().map(|v| v.as_f64()).sum::<f64>() / x.len() as f64;
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(m)), Op::Mean(a), tracked))
    }

    /// Gradients of the single-element `loss` with respect to every tracked
    /// leaf recorded before it. Fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..=loss.index).map(|_| None).collect();
        if root.tracked {
            grads[loss.index] = Some(vec![T::one()]);
        }

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, contrib: Vec<T>| {
                if !self.nodes[v.index].tracked {
                    return;
                }
                match &mut grads[v.index] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| self.nodes[v.index].value.values();
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.dims(), g)?);
                }
                Op::Add(a, b) => {
                    acc(*b, reduce_like(&g, val(*b).len(), |x| x));
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, reduce_like(&g, val(*b).len(), |x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga: Vec<T> = if bv.len() == 1 {
                        g.iter().map(|&x| x * bv[0]).collect()
                    } else {
                        g.iter().zip(bv).map(|(&x, &y)| x * y).collect()
                    };
                    let prod: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    acc(*b, reduce_like(&prod, bv.len(), |x| x));
                    acc(*a, ga);
                }
                Op::ScalarMul(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
                Op::Abs(a) => {
                    let contrib = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&x, &v)| {
                            if v > T::zero() {
                                x
                            } else if v < T::zero() {
                                -x
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(*a, contrib)
                }
                Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(&x, &v)| x / v).collect()),
                Op::Neg(a) => acc(*a, g.iter().map(|&x| -x).collect()),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let x = &self.nodes[input.index].value;
                    let k = &self.nodes[kernel.index].value;
                    let xd = dims4(x)?;
                    let gd = dims4(&node.value)?;
                    let (_, _, kh, kw) = k.nchw()?;
                    if let Some(b) = bias {
                        acc(*b, kernels::channel_sums(&g, gd));
                    }
                    if self.nodes[kernel.index].tracked {
                        let gk = kernels::kernel_grad(
                            &g,
                            gd,
                            x.values(),
                            xd,
                            (kh, kw),
                            geom.stride,
                            geom.padding,
                        );
                        acc(*kernel, gk);
                    }
                    if self.nodes[input.index].tracked {
                        let gx = kernels::scatter(
                            &g,
                            gd,
                            k.values(),
                            xd.c,
                            (kh, kw),
                            geom.stride,
                            geom.padding,
                            (xd.h, xd.w),
                            None,
                        );
                        acc(*input, gx);
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let x = &self.nodes[input.index].value;
                    let k = &self.nodes[kernel.index].value;
                    let xd = dims4(x)?;
                    let gd = dims4(&node.value)?;
                    let (_, _, kh, kw) = k.nchw()?;
                    if let Some(b) = bias {
                        acc(*b, kernels::channel_sums(&g, gd));
                    }
                    if self.nodes[kernel.index].tracked {
                        let gk = kernels::kernel_grad(
                            x.values(),
                            xd,
                            &g,
                            gd,
                            (kh, kw),
                            geom.stride,
                            geom.padding,
                        );
                        acc(*kernel, gk);
                    }
                    if self.nodes[input.index].tracked {
                        let gx = kernels::gather(
                            &g,
                            gd,
                            k.values(),
                            xd.c,
                            (kh, kw),
                            geom.stride,
                            geom.padding,
                            (xd.h, xd.w),
                            None,
                        );
                        acc(*input, gx);
                    }
                }
                Op::Norm {
                    input,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let d = dims4(&node.value)?;
                    let gain_v = val(*gain);
                    let mut dgain = vec![T::zero(); d.c];
                    let mut dshift = vec![T::zero(); d.c];
                    // per-channel sums of dy and dy * xhat
                    for n in 0..d.n {
                        for c in 0..d.c {
                            let base = (n * d.c + c) * d.plane();
                            for i in base..base + d.plane() {
                                dshift[c] += g[i];
                                dgain[c] += g[i] * xhat[i];
                            }
                        }
                    }
                    if self.nodes[input.index].tracked {
                        let m = T::from_usize(d.n * d.plane()).unwrap();
                        let mut dx = vec![T::zero(); g.len()];
                        for n in 0..d.n {
                            for c in 0..d.c {
                                let base = (n * d.c + c) * d.plane();
                                for i in base..base + d.plane() {
                                    dx[i] = if *batch {
                                        // dxhat = g * gain; sums scale by gain too
                                        gain_v[c] * inv_std[c] / m
                                            * (m * g[i] - dshift[c] - xhat[i] * dgain[c])
                                    } else {
                                        g[i] * gain_v[c] * inv_std[c]
                                    };
                                }
                            }
                        }
                        acc(*input, dx);
                    }
                    acc(*gain, dgain);
                    acc(*shift, dshift);
                }
                Op::Act(kind, a) => {
                    let x = val(*a);
                    let y = node.value.values();
                    let contrib = match *kind {
                        Activation::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                            .collect(),
                        Activation::LeakyRelu(alpha) => {
                            let alpha = T::from_f64_lossy(alpha);
                            g.iter()
                                .zip(x)
                                .map(|(&g, &x)| if x > T::zero() { g } else { g * alpha })
                                .collect()
                        }
                        Activation::Tanh => g
                            .iter()
                            .zip(y)
                            .map(|(&g, &y)| g * (T::one() - y * y))
                            .collect(),
                        Activation::Sigmoid => g
                            .iter()
                            .zip(y)
                            .map(|(&g, &y)| g * y * (T::one() - y))
                            .collect(),
                        Activation::Softplus => {
                            g.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect()
                        }
                    };
                    acc(*a, contrib)
                }
                Op::Dropout { input, mask } => {
                    acc(*input, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())
                }
                Op::Concat(parts) => {
                    let (n, _, h, w) = node.value.nchw()?;
                    let plane = h * w;
                    let chans: Vec<usize> =
                        parts.iter().map(|p| self.nodes[p.index].value.dims()[1]).collect();
                    let total: usize = chans.iter().sum();
                    let mut offset = 0;
                    for (p, &pc) in parts.iter().zip(&chans) {
                        let mut part = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            part.extend_from_slice(&g[start..start + pc * plane]);
                        }
                        acc(*p, part);
                        offset += pc;
                    }
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    let share = g[0] / T::from_usize(n).unwrap();
                    acc(*a, vec![share; n]);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }
}

/// Sums `g` down to one element when the operand was broadcast.
fn reduce_like<T: Scalar>(g: &[T], len: usize, f: impl Fn(T) -> T) -> Vec<T> {
    if len == 1 && g.len() != 1 {
        vec![f(g.iter().copied().sum())]
    } else {
        g.iter().map(|&x| f(x)).collect()
    }
}

/// Gradients with respect to the tracked leaves of one tape.
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` means the gradient is zero (the leaf did not influence the loss).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}
