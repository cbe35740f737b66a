//! Dilated 2-D cross-correlation via im2col + GEMM.
//!
//! Images are processed independently, so the per-image loops run on the
//! rayon pool. Weight and bias gradients are summed over fixed-size image
//! chunks in chunk order, which keeps results bit-identical regardless of
//! how many worker threads execute them.

use rayon::prelude::*;

use super::{gemm, Element};
use crate::error::{Error, Result};

/// Images per partial weight-gradient accumulator.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of `(k_eff - 1) / 2`; output keeps the input size.
    Same,
    Explicit(usize),
}

/// Resolved sizes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Spatial extent covered by a dilated kernel.
pub fn effective_kernel(kernel: usize, dilation: usize) -> usize {
    kernel + (kernel - 1) * (dilation - 1)
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        dilation: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let &[batch, in_channels, in_h, in_w] = x_shape else {
            return Err(Error::shape("conv2d", format!("input {x_shape:?} is not 4-D")));
        };
        let &[out_channels, w_in, kh, kw] = w_shape else {
            return Err(Error::shape("conv2d", format!("weight {w_shape:?} is not 4-D")));
        };
        if w_in != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {w_in} input channels, input has {in_channels}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be square and odd")));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d dilation and stride must be positive".into(),
            ));
        }
        let k_eff = effective_kernel(kh, dilation);
        let pad = match padding {
            Padding::Same if stride != 1 => {
                return Err(Error::InvalidArgument(
                    "\"same\" padding requires stride 1".into(),
                ))
            }
            Padding::Same => (k_eff - 1) / 2,
            Padding::Explicit(p) => p,
        };
        if in_h + 2 * pad < k_eff || in_w + 2 * pad < k_eff {
            return Err(Error::shape(
                "conv2d",
                format!("effective kernel {k_eff} exceeds padded input {in_h}x{in_w} (pad {pad})"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel: kh,
            dilation,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k_eff) / stride + 1,
            out_w: (in_w + 2 * pad - k_eff) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn out_image(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// A 1x1 stride-1 unpadded convolution reads the input as its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ow * stride + offset` is in bounds.
    fn valid_range(&self, offset: isize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        // smallest o with o*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        // largest o with o*s + offset <= in_len - 1
        let hi_num = in_len as isize - 1 - offset;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.min(out_len as isize) as usize;
        let hi = (hi + 1).clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let (k, d, s) = (self.kernel, self.dilation as isize, self.stride);
        for c in 0..self.in_channels {
            let src = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let off_h = ki as isize * d - self.pad as isize;
                    let off_w = kj as isize * d - self.pad as isize;
                    let (w_lo, w_hi) = self.valid_range(off_w, self.in_w, self.out_w);
                    for oh in 0..self.out_h {
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        let ih = (oh * s) as isize + off_h;
                        if ih < 0 || ih >= self.in_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        line[..w_lo].fill(T::zero());
                        line[w_hi..].fill(T::zero());
                        if w_lo == w_hi {
                            continue;
                        }
                        if s == 1 {
                            let start = (w_lo as isize + off_w) as usize;
                            line[w_lo..w_hi].copy_from_slice(&src_row[start..start + (w_hi - w_lo)]);
                        } else {
                            for ow in w_lo..w_hi {
                                line[ow] = src_row[(ow as isize * s as isize + off_w) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_plane();
        let (k, d, s) = (self.kernel, self.dilation as isize, self.stride);
        for c in 0..self.in_channels {
            let dst = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let off_h = ki as isize * d - self.pad as isize;
                    let off_w = kj as isize * d - self.pad as isize;
                    let (w_lo, w_hi) = self.valid_range(off_w, self.in_w, self.out_w);
                    for oh in 0..self.out_h {
                        let ih = (oh * s) as isize + off_h;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let line = &src[oh * self.out_w..(oh + 1) * self.out_w];
                        let dst_row =
                            &mut dst[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        if w_lo == w_hi {
                            continue;
                        }
                        if s == 1 {
                            let start = (w_lo as isize + off_w) as usize;
                            let dst = &mut dst_row[start..start + (w_hi - w_lo)];
                            for (a, &b) in dst.iter_mut().zip(&line[w_lo..w_hi]) {
                                *a = *a + b;
                            }
                        } else {
                            for ow in w_lo..w_hi {
                                let i = (ow as isize * s as isize + off_w) as usize;
                                dst_row[i] = dst_row[i] + line[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (plane, patch) = (g.out_plane(), g.patch());
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    out.par_chunks_mut(g.out_image())
        .zip(x.par_chunks(g.in_image()))
        .for_each_init(Vec::new, |cols, (o, img)| {
            for (c, b) in bias.iter().enumerate() {
                o[c * plane..(c + 1) * plane].fill(*b);
            }
            if g.is_pointwise() {
                gemm(g.out_channels, patch, plane, w, false, img, false, o, true);
            } else {
                cols.resize(patch * plane, T::zero());
                g.im2col(img, cols);
                gemm(g.out_channels, patch, plane, w, false, cols, false, o, true);
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need_x: bool,
    need_w: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (plane, patch) = (g.out_plane(), g.patch());

    let dx = need_x.then(|| {
        let mut dx = vec![T::zero(); g.batch * g.in_image()];
        dx.par_chunks_mut(g.in_image())
            .zip(grad_out.par_chunks(g.out_image()))
            .for_each_init(Vec::new, |dcols, (dimg, gout)| {
                if g.is_pointwise() {
                    gemm(patch, g.out_channels, plane, w, true, gout, false, dimg, false);
                } else {
                    dcols.resize(patch * plane, T::zero());
                    gemm(patch, g.out_channels, plane, w, true, gout, false, dcols, false);
                    g.col2im(dcols, dimg);
                }
            });
        dx
    });

    let dw = need_w.then(|| {
        let partials: Vec<Vec<T>> = x
            .par_chunks(g.in_image() * GRAD_CHUNK)
            .zip(grad_out.par_chunks(g.out_image() * GRAD_CHUNK))
            .map(|(xs, gs)| {
                let mut acc = vec![T::zero(); g.out_channels * patch];
                let mut cols = if g.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); patch * plane]
                };
                for (img, gout) in xs.chunks(g.in_image()).zip(gs.chunks(g.out_image())) {
                    let cols_ref: &[T] = if g.is_pointwise() {
                        img
                    } else {
                        g.im2col(img, &mut cols);
                        &cols
                    };
                    gemm(g.out_channels, plane, patch, gout, false, cols_ref, true, &mut acc, true);
                }
                acc
            })
            .collect();
        sum_in_order(partials, g.out_channels * patch)
    });

    let dbias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for gout in grad_out.chunks(g.out_image()) {
            for (c, d) in db.iter_mut().enumerate() {
                *d = *d + gout[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        x: dx,
        w: dw,
        bias: dbias,
    }
}

fn sum_in_order<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t = *t + v;
        }
    }
    total
}
