//! Quality compensation block.
//!
//! Eight 3×3 compensation convolutions (each followed by ReLU) run over the
//! low-quality global map; a single shared 1×1 fusion convolution integrates
//! each of them, the eight fused maps are summed and pooled, and the pooled
//! input map is added back as the residual.
//!
//! Because the fusion is linear, `Σᵢ pool(F·Sᵢ + b) = F·pool(Σᵢ Sᵢ) + 8b`;
//! the implementation uses the right-hand side.

use crate::encoder::GLOBAL_CHANNELS;
use crate::error::{Error, Result};
use crate::numerics::{
    add_channel_bias, channel_sums, conv2d_backward_cols, conv2d_cols, global_avg_pool,
    global_avg_pool_backward, im2col, relu_backward_inplace, relu_inplace, ConvGeometry,
    RngStream, Tensor,
};

pub const N_TRANSFORMS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct QcbParams {
    /// 8 × 64 × 64 × 3 × 3
    pub comp_weight: Tensor,
    /// 8 × 64
    pub comp_bias: Tensor,
    /// 64 × 64 × 1 × 1, zero at initialisation
    pub fuse_weight: Tensor,
    pub fuse_bias: Tensor,
}

impl QcbParams {
    /// Compensation kernels are fan-in scaled uniform; the fusion conv
    /// starts at zero so the block is an exact identity.
    pub fn init(rng: &mut RngStream) -> Self {
        let c = GLOBAL_CHANNELS;
        let n = N_TRANSFORMS * c * c * 9;
        let bound = (6.0 / (c * 9) as f64).sqrt();
        QcbParams {
            comp_weight: Tensor::from_vec(
                &[N_TRANSFORMS, c, c, 3, 3],
                (0..n).map(|_| rng.uniform_range(-bound, bound)).collect(),
            )
            .expect("qcb init shape"),
            comp_bias: Tensor::zeros(&[N_TRANSFORMS, c]),
            fuse_weight: Tensor::zeros(&[c, c, 1, 1]),
            fuse_bias: Tensor::zeros(&[c]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        QcbParams {
            comp_weight: Tensor::zeros(self.comp_weight.shape()),
            comp_bias: Tensor::zeros(self.comp_bias.shape()),
            fuse_weight: Tensor::zeros(self.fuse_weight.shape()),
            fuse_bias: Tensor::zeros(self.fuse_bias.shape()),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("qcb.comp.weight", &self.comp_weight),
            ("qcb.comp.bias", &self.comp_bias),
            ("qcb.fuse.weight", &self.fuse_weight),
            ("qcb.fuse.bias", &self.fuse_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("qcb.comp.weight", &mut self.comp_weight),
            ("qcb.comp.bias", &mut self.comp_bias),
            ("qcb.fuse.weight", &mut self.fuse_weight),
            ("qcb.fuse.bias", &mut self.fuse_bias),
        ]
    }

    /// The eight kernels viewed as one 512-output convolution.
    fn stacked_kernels(&self) -> Tensor {
        let c = GLOBAL_CHANNELS;
        Tensor::from_vec(&[N_TRANSFORMS * c, c, 3, 3], self.comp_weight.data().to_vec())
            .expect("stacked kernel shape")
    }

    /// Row-major 64×64 fusion matrix.
    fn fuse_matrix(&self) -> &[f64] {
        self.fuse_weight.data()
    }
}

#[derive(Debug, Clone)]
pub struct QcbCache {
    geometry: ConvGeometry,
    cols: Vec<f64>,
    /// ReLU outputs of all eight transforms, stacked 512×H×W
    comp: Tensor,
    pooled_comp_sum: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QcbOutput {
    pub f_new: Vec<f64>,
    pub cache: QcbCache,
}

fn check_channels(f_low: &Tensor) -> Result<()> {
    let (c, _, _) = f_low.chw()?;
    if c != GLOBAL_CHANNELS {
        return Err(Error::Shape(format!(
            "compensation block expects {GLOBAL_CHANNELS} channels, got map {:?}",
            f_low.shape()
        )));
    }
    Ok(())
}

pub fn qcb_forward(f_low: &Tensor, params: &QcbParams) -> Result<QcbOutput> {
    check_channels(f_low)?;
    let c = GLOBAL_CHANNELS;
    let kernels = params.stacked_kernels();
    let g = ConvGeometry::new(f_low.shape(), kernels.shape(), 1, 1)?;
    let cols = im2col(f_low.data(), &g);
    let mut comp = conv2d_cols(&cols, &kernels, &g);
    add_channel_bias(&mut comp, params.comp_bias.data());
    relu_inplace(&mut comp);

    let pooled_all = global_avg_pool(&comp)?;
    let mut pooled_comp_sum = vec![0.0; c];
    for chunk in pooled_all.chunks(c) {
        for (a, v) in pooled_comp_sum.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    let fuse = params.fuse_matrix();
    let residual = global_avg_pool(f_low)?;
    let f_new = (0..c)
        .map(|o| {
            let fused: f64 = fuse[o * c..(o + 1) * c]
                .iter()
                .zip(&pooled_comp_sum)
                .map(|(w, s)| w * s)
                .sum::<f64>()
                + N_TRANSFORMS as f64 * params.fuse_bias.data()[o];
            fused + residual[o]
        })
        .collect();
    Ok(QcbOutput {
        f_new,
        cache: QcbCache {
            geometry: g,
            cols,
            comp,
            pooled_comp_sum,
        },
    })
}

/// Returns parameter gradients and `∂L/∂f_low` given `∂L/∂f_new`.
pub fn qcb_backward(upstream: &[f64], cache: &QcbCache, params: &QcbParams) -> Result<(QcbParams, Tensor)> {
    let c = GLOBAL_CHANNELS;
    if upstream.len() != c {
        return Err(Error::Shape(format!(
            "upstream has {} entries, expected {c}",
            upstream.len()
        )));
    }
    let g = &cache.geometry;
    let (h, w) = (g.h, g.w);
    let fuse = params.fuse_matrix();
    let mut grads = params.zeros_like();

    let gf = grads.fuse_weight.data_mut();
    for o in 0..c {
        for i in 0..c {
            gf[o * c + i] = upstream[o] * cache.pooled_comp_sum[i];
        }
    }
    for (b, u) in grads.fuse_bias.data_mut().iter_mut().zip(upstream) {
        *b = N_TRANSFORMS as f64 * u;
    }

    // ∂L/∂pool(Σ S) = Fᵀ u, shared by all eight transforms
    let grad_pooled: Vec<f64> = (0..c)
        .map(|i| (0..c).map(|o| fuse[o * c + i] * upstream[o]).sum())
        .collect();
    let stacked: Vec<f64> = (0..N_TRANSFORMS).flat_map(|_| grad_pooled.iter().copied()).collect();
    let mut grad_comp = global_avg_pool_backward(&stacked, g.out_h, g.out_w);
    relu_backward_inplace(&mut grad_comp, &cache.comp);
    grads.comp_bias = Tensor::from_vec(&[N_TRANSFORMS, c], channel_sums(&grad_comp))?;
    let (gi, gk) = conv2d_backward_cols(&grad_comp, &cache.cols, &params.stacked_kernels(), g, true)?;
    grads.comp_weight = gk.reshape(params.comp_weight.shape())?;

    let mut grad_low = global_avg_pool_backward(upstream, h, w);
    grad_low.add_scaled(&gi.expect("input gradient"), 1.0)?;
    Ok((grads, grad_low))
}
