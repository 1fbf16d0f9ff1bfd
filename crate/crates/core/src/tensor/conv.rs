//! im2col kernels shared by direct and transposed convolutions.

use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;
use crate::error::{param_err, Result};

/// Output extent of a strided cross-correlation.
pub fn conv2d_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(param_err!("stride must be at least 1"));
    }
    if kernel == 0 || kernel > input + 2 * padding {
        return Err(param_err!(
            "kernel {} does not fit input {} with padding {}",
            kernel,
            input,
            padding
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Output extent of a transposed convolution with zero input padding.
pub fn conv_transpose2d_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    output_padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(param_err!("stride must be at least 1"));
    }
    if input == 0 || kernel == 0 {
        return Err(param_err!("empty transposed convolution"));
    }
    Ok((input - 1) * stride + kernel + output_padding)
}

/// Sampling geometry: an image of `h x w` read at `oh x ow` kernel anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Output anchors `lo..hi` whose tap `kk` lands inside `0..extent`,
    /// and the input index read by anchor `lo`.
    #[inline]
    fn valid(&self, kk: usize, out: usize, extent: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        let hi = if extent + p > kk { ((extent + p - kk - 1) / s + 1).min(out) } else { 0 };
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + kk - p)
    }
}

/// Unfolds `[n, c, h, w]` into `[c*k*k, n*oh*ow]`.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &Geometry) -> Vec<T> {
    let plane = g.oh * g.ow;
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    for c in 0..g.c {
        for ky in 0..g.k {
            let (y0, y1, iy0) = g.valid(ky, g.oh, g.h);
            for kx in 0..g.k {
                let (x0, x1, ix0) = g.valid(kx, g.ow, g.w);
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &img[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for (oy, iy) in (y0..y1).zip((iy0..).step_by(g.stride)) {
                        let d = &mut dst[oy * g.ow + x0..oy * g.ow + x1];
                        let s = &src[iy * g.w + ix0..];
                        if g.stride == 1 {
                            d.copy_from_slice(&s[..d.len()]);
                        } else {
                            for (o, v) in d.iter_mut().zip(s.iter().step_by(g.stride)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `img`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let plane = g.oh * g.ow;
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            let (y0, y1, iy0) = g.valid(ky, g.oh, g.h);
            for kx in 0..g.k {
                let (x0, x1, ix0) = g.valid(kx, g.ow, g.w);
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut img[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for (oy, iy) in (y0..y1).zip((iy0..).step_by(g.stride)) {
                        let s = &src[oy * g.ow + x0..oy * g.ow + x1];
                        let d = &mut dst[iy * g.w + ix0..];
                        for (o, v) in d.iter_mut().step_by(g.stride).zip(s) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, p]` <-> `[c, n, p]`.
pub(crate) fn swap_leading<T: Scalar>(src: &[T], a: usize, b: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * p..(j * a + i + 1) * p]
                .copy_from_slice(&src[(i * b + j) * p..(i * b + j + 1) * p]);
        }
    }
    out
}
