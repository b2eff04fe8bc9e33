//! Dense row-major tensors, the recording tape and gradient checking.
//!
//! Four-dimensional activations are laid out batch, channel, height, width.
//! Training runs in `f32`; `f64` exists for finite-difference checks.

mod gradcheck;
pub(crate) mod kernels;
mod rng;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use rng::Rng;
pub use tape::{Activation, ConvGeometry, Gradients, Moments, NormMode, Tape, Var, NORM_EPS};

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: Vec<usize>,
    values: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::ZeroExtent(dims.to_vec()));
    }
    Ok(dims.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], values: Vec<T>) -> Result<Self> {
        let n = check_dims(dims)?;
        if values.len() != n {
            return Err(Error::LengthMismatch {
                dims: dims.to_vec(),
                got: values.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            values,
        })
    }

    pub fn filled(dims: &[usize], value: T) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            values: vec![value; n],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::filled(dims, T::zero())
    }

    /// Independent normal draws, consumed from `rng` in row-major order.
    pub fn gaussian(dims: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        let n = check_dims(dims)?;
        let values = (0..n)
            .map(|_| T::from_f64_lossy(rng.gaussian(mean, std)))
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            values,
        })
    }

    pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let n = check_dims(dims)?;
        let values = (0..n)
            .map(|_| T::from_f64_lossy(rng.uniform_in(lo, hi)))
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            values,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            values: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.values)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Extents of a 4-D tensor as (batch, channels, height, width).
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a 4-D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Channels `start..start + len` of a 4-D tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, h, w) = self.nchw()?;
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut values = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            values.extend_from_slice(&self.values[base..base + len * plane]);
        }
        Self::new(&[n, len, h, w], values)
    }

    /// Concatenates 4-D tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("batch"))?;
        let (_, c, h, w) = first.nchw()?;
        let mut n = 0;
        let mut values = Vec::new();
        for p in parts {
            let (pn, pc, ph, pw) = p.nchw()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::DimsMismatch {
                    op: "stack_batch",
                    left: first.dims.clone(),
                    right: p.dims.clone(),
                });
            }
            n += pn;
            values.extend_from_slice(&p.values);
        }
        Self::new(&[n, c, h, w], values)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        (self.dims == other.dims).then(|| {
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max)
        })
    }
}
