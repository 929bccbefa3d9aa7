//! im2col based convolution kernels operating on one image at a time.

use super::{gemm, MatRef, Scalar};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be positive"));
    }
    if input + 2 * padding < kernel {
        return Err(Error::shape(format!(
            "conv2d input extent {input} with padding {padding} is smaller than kernel {kernel}"
        )));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose tap `ox·stride + kj − pad` lands inside `0..width`.
fn valid_range(out_w: usize, width: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize) {
    // ox·s + kj >= pad  and  ox·s + kj < width + pad
    let lo = if kj >= pad {
        0
    } else {
        (pad - kj).div_ceil(stride)
    };
    let hi = if width + pad > kj {
        ((width + pad - kj - 1) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one CHW image into a `(C·k·k) × (Ho·Wo)` patch matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(g.out_w, g.width, s, kj, p);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = oy * s + ki;
                    if iy < p || iy - p >= g.height {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[(iy - p) * g.width..(iy - p + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if s == 1 {
                        let x0 = lo + kj - p;
                        line[lo..hi].copy_from_slice(&src_row[x0..x0 + (hi - lo)]);
                    } else {
                        for (ox, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src_row[(ox + lo) * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into a CHW image.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(g.out_w, g.width, s, kj, p);
                for oy in 0..g.out_h {
                    let iy = oy * s + ki;
                    if iy < p || iy - p >= g.height {
                        continue;
                    }
                    let dst_row = &mut dst[(iy - p) * g.width..(iy - p + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let x0 = lo + kj - p;
                        for (d, &v) in dst_row[x0..x0 + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst_row[ox * s + kj - p] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a whole NCHW batch. `kernel` is OIHW.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_plane = g.channels * g.height * g.width;
    let out_plane = out_channels * g.col_cols();
    let mut out = vec![T::zero(); batch * out_plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    let w = MatRef::new(kernel, out_channels, g.col_rows());
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let y = &mut out[n * out_plane..(n + 1) * out_plane];
        if g.is_pointwise() {
            gemm(w, MatRef::new(x, g.channels, g.col_cols()), y, T::zero());
        } else {
            im2col(g, x, &mut col);
            gemm(
                w,
                MatRef::new(&col, g.col_rows(), g.col_cols()),
                y,
                T::zero(),
            );
        }
        if let Some(b) = bias {
            let plane = g.col_cols();
            for (o, &bo) in b.iter().enumerate() {
                for v in &mut y[o * plane..(o + 1) * plane] {
                    *v += bo;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let in_plane = g.channels * g.height * g.width;
    let plane = g.col_cols();
    let out_plane = out_channels * plane;
    let rows = g.col_rows();
    let mut d_input = want_input.then(|| vec![T::zero(); batch * in_plane]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); out_channels * rows]);
    let mut d_bias = want_bias.then(|| vec![T::zero(); out_channels]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
    let mut dcol = vec![
        T::zero();
        if g.is_pointwise() || !want_input {
            0
        } else {
            rows * plane
        }
    ];
    let w = MatRef::new(kernel, out_channels, rows);
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let dy = MatRef::new(
            &grad_out[n * out_plane..(n + 1) * out_plane],
            out_channels,
            plane,
        );
        if let Some(db) = d_bias.as_mut() {
            for (o, v) in db.iter_mut().enumerate() {
                *v += dy.data[o * plane..(o + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            let patches = if g.is_pointwise() {
                MatRef::new(x, rows, plane)
            } else {
                im2col(g, x, &mut col);
                MatRef::new(&col, rows, plane)
            };
            gemm(dy, patches.t(), dk, T::one());
        }
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                gemm(w.t(), dy, dx, T::zero());
            } else {
                gemm(w.t(), dy, &mut dcol, T::zero());
                col2im(g, &dcol, dx);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
