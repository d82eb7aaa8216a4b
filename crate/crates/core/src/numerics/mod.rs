//! Deterministic dense-tensor substrate.

mod conv;
mod image;
mod io;
mod rng;
mod tensor;

pub use conv::{conv2d, conv2d_backward, ConvGeometry};
pub(crate) use conv::{conv2d_backward_cols, conv2d_cols, gemm, im2col};
pub use image::{resize_bilinear, Image};
pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, TENSOR_MAGIC, TENSOR_VERSION};
pub use rng::RngStream;
pub use tensor::Tensor;

/// Norms below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v / ‖v‖₂`, or the zero vector when `‖v‖₂ < 1e-12`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n < NORM_EPS {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Adjoint of [`l2_normalize`]: maps `∂L/∂u` (u = v/‖v‖) to `∂L/∂v`.
pub fn l2_normalize_backward(v: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n < NORM_EPS {
        return vec![0.0; v.len()];
    }
    let proj: f64 = v.iter().zip(grad_unit).map(|(a, g)| a * g).sum::<f64>() / (n * n);
    v.iter()
        .zip(grad_unit)
        .map(|(a, g)| (g - a * proj) / n)
        .collect()
}

/// Channel-wise spatial mean of a C×H×W map.
pub fn global_avg_pool(map: &Tensor) -> crate::Result<Vec<f64>> {
    let (c, h, w) = map.chw()?;
    let hw = h * w;
    Ok((0..c)
        .map(|ch| map.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect())
}

/// Adjoint of [`global_avg_pool`]: spreads each channel gradient uniformly.
pub fn global_avg_pool_backward(grad: &[f64], h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = Vec::with_capacity(grad.len() * hw);
    for &g in grad {
        data.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::from_vec(&[grad.len(), h, w], data).expect("pool adjoint shape")
}

pub fn relu_inplace(t: &mut Tensor) {
    t.map_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, activation: &Tensor) {
    for (g, a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Adds `bias[c]` to every entry of channel `c`.
pub fn add_channel_bias(t: &mut Tensor, bias: &[f64]) {
    let hw = t.len() / bias.len();
    for (chunk, b) in t.data_mut().chunks_mut(hw).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Per-channel sums; the bias gradient of a convolution.
pub fn channel_sums(t: &Tensor) -> Vec<f64> {
    let c = t.shape()[0];
    let hw = t.len() / c;
    t.data().chunks(hw).map(|ch| ch.iter().sum()).collect()
}
