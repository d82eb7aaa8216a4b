//! 2D cross-correlation with zero padding, forward and backward.
//!
//! Both directions go through an im2col buffer and a single GEMM so that
//! the hot loops live in `matrixmultiply`.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` for row-major `a` (m×k), `b` (k×n), `c` (m×n).
/// `trans_a` / `trans_b` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major (or transposed) views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::Shape(format!("conv input must be C×H×W, got {s:?}"))),
        };
        let (c_out, kc, kh, kw) = match kernels {
            &[o, c, kh, kw] => (o, c, kh, kw),
            s => {
                return Err(Error::Shape(format!(
                    "conv kernels must be Cout×Cin×k×k, got {s:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(Error::Shape(format!(
                "input {input:?} has {c_in} channels but kernels {kernels:?} expect {kc}"
            )));
        }
        if kh != kw || kh == 0 {
            return Err(Error::Shape(format!("kernels {kernels:?} must be square")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "input {input:?} with pad {pad} is smaller than kernels {kernels:?}"
            )));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate of output row/col `o` at kernel offset `d`,
    /// or `None` when it lands in the zero padding.
    #[inline]
    fn src(o: usize, d: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + d).checked_sub(pad)?;
        (p < extent).then_some(p)
    }
}

/// Patch matrix of shape (C_in·k·k) × (H'·W').
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.k {
            for dx in 0..g.k {
                let row = (c * g.k + dy) * g.k + dx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(sy) = ConvGeometry::src(oy, dy, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(sx) = ConvGeometry::src(ox, dx, g.stride, g.pad, g.w) {
                            dst[oy * g.out_w + ox] = plane[sy * g.w + sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.k {
            for dx in 0..g.k {
                let row = (c * g.k + dy) * g.k + dx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(sy) = ConvGeometry::src(oy, dy, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(sx) = ConvGeometry::src(ox, dx, g.stride, g.pad, g.w) {
                            plane[sy * g.w + sx] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of a C_in×H×W input with C_out×C_in×k×k kernels.
///
/// Output extents use floor division: `H' = (H + 2·pad − k) / stride + 1`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, pad)?;
    let cols = im2col(input.data(), &g);
    Ok(conv2d_cols(&cols, kernels, &g))
}

pub(crate) fn conv2d_cols(cols: &[f64], kernels: &Tensor, g: &ConvGeometry) -> Tensor {
    let p = g.positions();
    let mut out = vec![0.0; g.c_out * p];
    gemm(
        g.c_out,
        g.patch_len(),
        p,
        kernels.data(),
        false,
        cols,
        false,
        0.0,
        &mut out,
    );
    Tensor::from_vec(&[g.c_out, g.out_h, g.out_w], out).expect("conv output shape")
}

/// Gradients of `sum(upstream ⊙ conv2d(input, kernels))`.
pub fn conv2d_backward(
    upstream: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, pad)?;
    let cols = im2col(input.data(), &g);
    conv2d_backward_cols(upstream, &cols, kernels, &g, true)
        .map(|(gi, gk)| (gi.expect("input grad requested"), gk))
}

/// Backward from a cached patch matrix. `want_input` skips the col2im pass
/// for first-layer convolutions whose input gradient is never used.
pub(crate) fn conv2d_backward_cols(
    upstream: &Tensor,
    cols: &[f64],
    kernels: &Tensor,
    g: &ConvGeometry,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    if upstream.shape() != [g.c_out, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match conv output {:?}",
            upstream.shape(),
            [g.c_out, g.out_h, g.out_w]
        )));
    }
    let p = g.positions();
    let kl = g.patch_len();
    let mut grad_k = vec![0.0; g.c_out * kl];
    gemm(g.c_out, p, kl, upstream.data(), false, cols, true, 0.0, &mut grad_k);
    let grad_k = Tensor::from_vec(kernels.shape(), grad_k)?;
    let grad_in = if want_input {
        let mut grad_cols = vec![0.0; kl * p];
        gemm(kl, g.c_out, p, kernels.data(), true, upstream.data(), false, 0.0, &mut grad_cols);
        Some(Tensor::from_vec(&[g.c_in, g.h, g.w], col2im(&grad_cols, g))?)
    } else {
        None
    };
    Ok((grad_in, grad_k))
}
