//! im2col + GEMM kernels for 2-D convolution and its two adjoints.
//!
//! All three kernels share one [`ConvGeom`]. With `x` the wide side
//! `(N, Ci, H, W)`, `w` the filters `(Co, Ci, k, k)` and `y` the narrow side
//! `(N, Co, Ho, Wo)`, they realize the trilinear form `<conv(x, w), y>` in each
//! of its three slots, which is what makes every derivative of every kernel
//! another kernel of the same family.

use crate::tensor::Tensor;

/// Spatial geometry of a convolution. `pad` is the leading (top/left)
/// padding; trailing padding is whatever `out_hw` implies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl ConvGeom {
    /// Standard strided convolution with symmetric padding.
    pub fn forward(in_hw: (usize, usize), kernel: usize, stride: usize, pad: usize) -> Self {
        let out = |n: usize| {
            let padded = n + 2 * pad;
            assert!(padded >= kernel, "kernel {kernel} larger than padded input {padded}");
            (padded - kernel) / stride + 1
        };
        Self {
            kernel,
            stride,
            pad,
            in_hw,
            out_hw: (out(in_hw.0), out(in_hw.1)),
        }
    }

    /// Geometry of the transposed convolution that maps `narrow_hw` up to
    /// `(n - 1) * stride - 2 * pad + kernel`.
    pub fn transposed(narrow_hw: (usize, usize), kernel: usize, stride: usize, pad: usize) -> Self {
        let up = |n: usize| (n - 1) * stride + kernel - 2 * pad;
        Self {
            kernel,
            stride,
            pad,
            in_hw: (up(narrow_hw.0), up(narrow_hw.1)),
            out_hw: narrow_hw,
        }
    }

    /// Size-preserving stride-1 geometry: leading pad `pad`, trailing pad
    /// `kernel - 1 - pad`.
    pub fn same(hw: (usize, usize), kernel: usize, pad: usize) -> Self {
        assert!(pad < kernel);
        Self {
            kernel,
            stride: 1,
            pad,
            in_hw: hw,
            out_hw: hw,
        }
    }

    fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }

    fn in_len(&self) -> usize {
        self.in_hw.0 * self.in_hw.1
    }
}

fn im2col(x: &[f32], channels: usize, g: &ConvGeom, cols: &mut [f32]) {
    let (h, w) = g.in_hw;
    let (ho, wo) = g.out_hw;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f32], channels: usize, g: &ConvGeom, x: &mut [f32]) {
    let (h, w) = g.in_hw;
    let (ho, wo) = g.out_hw;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check(x_shape: &[usize], w_shape: &[usize], y_shape: &[usize], g: &ConvGeom) {
    assert_eq!(w_shape.len(), 4, "filters must be (Co, Ci, k, k)");
    assert_eq!(w_shape[2], g.kernel);
    assert_eq!(w_shape[3], g.kernel);
    assert_eq!(x_shape.len(), 4);
    assert_eq!(y_shape.len(), 4);
    assert_eq!(x_shape[0], y_shape[0], "batch mismatch");
    assert_eq!(x_shape[1], w_shape[1], "input channels {x_shape:?} vs filters {w_shape:?}");
    assert_eq!(y_shape[1], w_shape[0], "output channels {y_shape:?} vs filters {w_shape:?}");
    assert_eq!((x_shape[2], x_shape[3]), g.in_hw, "input size vs geometry");
    assert_eq!((y_shape[2], y_shape[3]), g.out_hw, "output size vs geometry");
}

/// `y = conv(x, w)`.
pub fn conv2d(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let (n, ci, co) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let y_shape = [n, co, g.out_hw.0, g.out_hw.1];
    check(x.shape(), w.shape(), &y_shape, g);
    let kk = g.patch_len(ci);
    let p = g.out_len();
    let mut cols = vec![0f32; kk * p];
    let mut y = vec![0f32; n * co * p];
    for b in 0..n {
        im2col(&x.data()[b * ci * g.in_len()..(b + 1) * ci * g.in_len()], ci, g, &mut cols);
        let out = &mut y[b * co * p..(b + 1) * co * p];
        // SAFETY: dimensions and strides match the slice lengths checked above.
        unsafe {
            matrixmultiply::sgemm(
                co, kk, p, 1.0,
                w.data().as_ptr(), kk as isize, 1,
                cols.as_ptr(), p as isize, 1,
                0.0, out.as_mut_ptr(), p as isize, 1,
            );
        }
    }
    Tensor::from_parts(y_shape.to_vec(), y)
}

/// Adjoint of [`conv2d`] in its first argument: maps a narrow-side tensor
/// `y` back to the wide side. This is the transposed convolution.
pub fn conv2d_transpose(y: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let (n, co, ci) = (y.shape()[0], w.shape()[0], w.shape()[1]);
    let x_shape = [n, ci, g.in_hw.0, g.in_hw.1];
    check(&x_shape, w.shape(), y.shape(), g);
    let kk = g.patch_len(ci);
    let p = g.out_len();
    let mut cols = vec![0f32; kk * p];
    let mut x = vec![0f32; n * ci * g.in_len()];
    for b in 0..n {
        let yb = &y.data()[b * co * p..(b + 1) * co * p];
        // SAFETY: w is (co, kk) row-major, read transposed as (kk, co).
        unsafe {
            matrixmultiply::sgemm(
                kk, co, p, 1.0,
                w.data().as_ptr(), 1, kk as isize,
                yb.as_ptr(), p as isize, 1,
                0.0, cols.as_mut_ptr(), p as isize, 1,
            );
        }
        col2im(&cols, ci, g, &mut x[b * ci * g.in_len()..(b + 1) * ci * g.in_len()]);
    }
    Tensor::from_parts(x_shape.to_vec(), x)
}

/// Adjoint of [`conv2d`] in its filter argument.
pub fn conv2d_filter_grad(x: &Tensor, y: &Tensor, g: &ConvGeom) -> Tensor {
    let (n, ci, co) = (x.shape()[0], x.shape()[1], y.shape()[1]);
    let w_shape = [co, ci, g.kernel, g.kernel];
    check(x.shape(), &w_shape, y.shape(), g);
    let kk = g.patch_len(ci);
    let p = g.out_len();
    let mut cols = vec![0f32; kk * p];
    let mut dw = vec![0f32; co * kk];
    for b in 0..n {
        im2col(&x.data()[b * ci * g.in_len()..(b + 1) * ci * g.in_len()], ci, g, &mut cols);
        let yb = &y.data()[b * co * p..(b + 1) * co * p];
        // SAFETY: cols is (kk, p) row-major, read transposed as (p, kk).
        unsafe {
            matrixmultiply::sgemm(
                co, p, kk, 1.0,
                yb.as_ptr(), p as isize, 1,
                cols.as_ptr(), 1, p as isize,
                1.0, dw.as_mut_ptr(), kk as isize, 1,
            );
        }
    }
    Tensor::from_parts(w_shape.to_vec(), dw)
}
