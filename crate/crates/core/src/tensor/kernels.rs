//! Direct convolution loops shared by the forward and backward passes.
//!
//! `gather` is a strided cross-correlation (conv2d forward, and the input
//! gradient of a transposed convolution). `scatter` is its adjoint (transposed
//! convolution forward, and the input gradient of conv2d). `kernel_grad`
//! correlates two activations into kernel-shaped gradients for both.
//!
//! Every output element is summed in a fixed order by exactly one worker, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Indices `x` in `0..count` with `0 <= x * stride + offset < limit`.
fn valid_range(count: usize, offset: isize, stride: usize, limit: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (limit as isize - offset + s - 1).div_euclid(s);
    let lo = lo.clamp(0, count as isize) as usize;
    let hi = hi.clamp(0, count as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[n,o,y,x] = bias[o] + sum_{c,i,j} src[n,c,y*s+i-p,x*s+j-p] * k[o,c,i,j]`
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather<T: Scalar>(
    src: &[T],
    sd: Dims4,
    kernel: &[T],
    out_c: usize,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); sd.n * out_c * oh * ow];
    let p = pad as isize;
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let b = idx / out_c;
            let o = idx % out_c;
            if let Some(bias) = bias {
                plane.fill(bias[o]);
            }
            for c in 0..sd.c {
                let src_plane = &src[(b * sd.c + c) * sd.plane()..][..sd.plane()];
                let kbase = (o * sd.c + c) * kh * kw;
                for i in 0..kh {
                    let (ylo, yhi) = valid_range(oh, i as isize - p, stride, sd.h);
                    for j in 0..kw {
                        let wgt = kernel[kbase + i * kw + j];
                        let off = j as isize - p;
                        let (xlo, xhi) = valid_range(ow, off, stride, sd.w);
                        for y in ylo..yhi {
                            let iy = y * stride + i - pad;
                            let row = &src_plane[iy * sd.w..][..sd.w];
                            let out_row = &mut plane[y * ow..][..ow];
                            for x in xlo..xhi {
                                let ix = (x * stride) as isize + off;
                                out_row[x] += wgt * row[ix as usize];
                            }
                        }
                    }
                }
            }
        });
    out
}

/// `out[n,c,y*s+i-p,x*s+j-p] += src[n,o,y,x] * k[o,c,i,j]`, plus `bias[c]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter<T: Scalar>(
    src: &[T],
    sd: Dims4,
    kernel: &[T],
    out_c: usize,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); sd.n * out_c * oh * ow];
    let p = pad as isize;
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let b = idx / out_c;
            let c = idx % out_c;
            if let Some(bias) = bias {
                plane.fill(bias[c]);
            }
            for o in 0..sd.c {
                let src_plane = &src[(b * sd.c + o) * sd.plane()..][..sd.plane()];
                let kbase = (o * out_c + c) * kh * kw;
                for i in 0..kh {
                    let (ylo, yhi) = valid_range(sd.h, i as isize - p, stride, oh);
                    for j in 0..kw {
                        let wgt = kernel[kbase + i * kw + j];
                        let off = j as isize - p;
                        let (xlo, xhi) = valid_range(sd.w, off, stride, ow);
                        for y in ylo..yhi {
                            let oy = y * stride + i - pad;
                            let row = &src_plane[y * sd.w..][..sd.w];
                            let out_row = &mut plane[oy * ow..][..ow];
                            for x in xlo..xhi {
                                let ox = (x * stride) as isize + off;
                                out_row[ox as usize] += wgt * row[x];
                            }
                        }
                    }
                }
            }
        });
    out
}

/// `g[o,c,i,j] = sum_{n,y,x} a[n,o,y,x] * b[n,c,y*s+i-p,x*s+j-p]`
pub(crate) fn kernel_grad<T: Scalar>(
    a: &[T],
    ad: Dims4,
    b: &[T],
    bd: Dims4,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); ad.c * bd.c * kh * kw];
    let p = pad as isize;
    out.par_chunks_mut(bd.c * kh * kw)
        .enumerate()
        .for_each(|(o, chunk)| {
            for c in 0..bd.c {
                for i in 0..kh {
                    let (ylo, yhi) = valid_range(ad.h, i as isize - p, stride, bd.h);
                    for j in 0..kw {
                        let off = j as isize - p;
                        let (xlo, xhi) = valid_range(ad.w, off, stride, bd.w);
                        let mut acc = T::zero();
                        for n in 0..ad.n {
                            let a_plane = &a[(n * ad.c + o) * ad.plane()..][..ad.plane()];
                            let b_plane = &b[(n * bd.c + c) * bd.plane()..][..bd.plane()];
                            for y in ylo..yhi {
                                let by = y * stride + i - pad;
                                let a_row = &a_plane[y * ad.w..][..ad.w];
                                let b_row = &b_plane[by * bd.w..][..bd.w];
                                for x in xlo..xhi {
                                    let bx = (x * stride) as isize + off;
                                    acc += a_row[x] * b_row[bx as usize];
                                }
                            }
                        }
                        chunk[(c * kh + i) * kw + j] = acc;
                    }
                }
            }
        });
    out
}

/// Per-channel sum over batch and spatial axes.
pub(crate) fn channel_sums<T: Scalar>(src: &[T], d: Dims4) -> Vec<T> {
    let mut out = vec![T::zero(); d.c];
    for n in 0..d.n {
        for (c, acc) in out.iter_mut().enumerate() {
            let plane = &src[(n * d.c + c) * d.plane()..][..d.plane()];
            *acc += plane.iter().copied().sum::<T>();
        }
    }
    out
}
