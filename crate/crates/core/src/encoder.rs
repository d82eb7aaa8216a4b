//! Three-stage convolutional backbone, fusion head and multi-scale
//! descriptor, with hand-written backpropagation.
//!
//! Stage 2 output is the local feature map (32 channels), stage 3 output the
//! global map (64 channels). The head concatenates the pooled local features
//! with the compensated global vector, projects to `d` dimensions and
//! records the pre-normalisation norm used as the quality proxy.

use crate::error::{Error, Result};
use crate::numerics::{
    add_channel_bias, channel_sums, conv2d_backward_cols, conv2d_cols, global_avg_pool,
    global_avg_pool_backward, im2col, l2_norm, l2_normalize, l2_normalize_backward,
    relu_backward_inplace, relu_inplace, resize_bilinear, ConvGeometry, Image, RngStream, Tensor,
};
use crate::qcb::{qcb_forward, QcbParams};

pub const LOCAL_CHANNELS: usize = 32;
pub const GLOBAL_CHANNELS: usize = 64;
pub const DEFAULT_DIM: usize = 32;
/// Smallest scaled side length accepted by [`multiscale_descriptor`].
pub const MIN_SCALED_SIDE: usize = 8;

const STAGES: [(usize, usize); 3] = [(3, 16), (16, LOCAL_CHANNELS), (LOCAL_CHANNELS, GLOBAL_CHANNELS)];
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Inference scales `{1/(2√2), 1/2, 1/√2, 1, √2}`.
pub fn default_scales() -> Vec<f64> {
    let r2 = std::f64::consts::SQRT_2;
    vec![1.0 / (2.0 * r2), 0.5, 1.0 / r2, 1.0, r2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(c_out: usize, c_in: usize, k: usize, rng: &mut RngStream) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * k * k;
        ConvLayer {
            weight: Tensor::from_vec(&[c_out, c_in, k, k], (0..n).map(|_| rng.uniform_range(-bound, bound)).collect())
                .expect("conv init shape"),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    /// d × (32 + 64)
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

impl EncoderParams {
    pub fn init(dim: usize, rng: &mut RngStream) -> Self {
        let conv1 = ConvLayer::init(STAGES[0].1, STAGES[0].0, 3, rng);
        let conv2 = ConvLayer::init(STAGES[1].1, STAGES[1].0, 3, rng);
        let conv3 = ConvLayer::init(STAGES[2].1, STAGES[2].0, 3, rng);
        let fan_in = LOCAL_CHANNELS + GLOBAL_CHANNELS;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let proj_weight = Tensor::from_vec(
            &[dim, fan_in],
            (0..dim * fan_in).map(|_| rng.uniform_range(-bound, bound)).collect(),
        )
        .expect("proj init shape");
        EncoderParams {
            conv1,
            conv2,
            conv3,
            proj_weight,
            proj_bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        let zl = |l: &ConvLayer| ConvLayer {
            weight: z(&l.weight),
            bias: z(&l.bias),
        };
        EncoderParams {
            conv1: zl(&self.conv1),
            conv2: zl(&self.conv2),
            conv3: zl(&self.conv3),
            proj_weight: z(&self.proj_weight),
            proj_bias: z(&self.proj_bias),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj_weight.shape()[0]
    }

    fn layers(&self) -> [&ConvLayer; 3] {
        [&self.conv1, &self.conv2, &self.conv3]
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("conv3.weight", &self.conv3.weight),
            ("conv3.bias", &self.conv3.bias),
            ("proj.weight", &self.proj_weight),
            ("proj.bias", &self.proj_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
            ("conv3.weight", &mut self.conv3.weight),
            ("conv3.bias", &mut self.conv3.bias),
            ("proj.weight", &mut self.proj_weight),
            ("proj.bias", &mut self.proj_bias),
        ]
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    geometry: [ConvGeometry; 3],
    cols: [Vec<f64>; 3],
    stage1: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub f_local: Tensor,
    pub f_global: Tensor,
    pub cache: EncoderCache,
}

fn conv_relu(input: &Tensor, layer: &ConvLayer) -> Result<(Tensor, ConvGeometry, Vec<f64>)> {
    let g = ConvGeometry::new(input.shape(), layer.weight.shape(), STRIDE, PAD)?;
    let cols = im2col(input.data(), &g);
    let mut out = conv2d_cols(&cols, &layer.weight, &g);
    add_channel_bias(&mut out, layer.bias.data());
    relu_inplace(&mut out);
    Ok((out, g, cols))
}

/// CHW tensor with the image's mean intensity removed. Without this the
/// pooled ReLU features of every image share one dominant direction and the
/// class signal rides on small deviations from it.
fn network_input(image: &Image) -> Tensor {
    let mut x = image.to_chw();
    let mean = x.data().iter().sum::<f64>() / x.data().len() as f64;
    x.data_mut().iter_mut().for_each(|v| *v -= mean);
    x
}

pub fn forward(image: &Image, params: &EncoderParams) -> Result<EncoderOutput> {
    let x = network_input(image);
    let (a1, g1, c1) = conv_relu(&x, &params.conv1)?;
    let (a2, g2, c2) = conv_relu(&a1, &params.conv2)?;
    let (a3, g3, c3) = conv_relu(&a2, &params.conv3)?;
    Ok(EncoderOutput {
        f_local: a2,
        f_global: a3,
        cache: EncoderCache {
            geometry: [g1, g2, g3],
            cols: [c1, c2, c3],
            stage1: a1,
        },
    })
}

/// Stage-1 pre-activation, exposed for linearity checks.
pub fn stage1_preactivation(image: &Image, params: &EncoderParams) -> Result<Tensor> {
    let x = network_input(image);
    let g = ConvGeometry::new(x.shape(), params.conv1.weight.shape(), STRIDE, PAD)?;
    let mut out = conv2d_cols(&im2col(x.data(), &g), &params.conv1.weight, &g);
    add_channel_bias(&mut out, params.conv1.bias.data());
    Ok(out)
}

/// Gradients with respect to every encoder parameter. Head entries stay zero.
pub fn backward(
    grad_local: &Tensor,
    grad_global: &Tensor,
    output: &EncoderOutput,
    params: &EncoderParams,
) -> Result<EncoderParams> {
    let cache = &output.cache;
    if grad_local.shape() != output.f_local.shape() || grad_global.shape() != output.f_global.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?}/{:?} does not match cached maps {:?}/{:?}",
            grad_local.shape(),
            grad_global.shape(),
            output.f_local.shape(),
            output.f_global.shape()
        )));
    }
    let mut grads = params.zeros_like();
    let layers = params.layers();

    let mut g3 = grad_global.clone();
    relu_backward_inplace(&mut g3, &output.f_global);
    grads.conv3.bias = Tensor::from_vec(&[g3.shape()[0]], channel_sums(&g3))?;
    let (gi, gk) = conv2d_backward_cols(&g3, &cache.cols[2], &layers[2].weight, &cache.geometry[2], true)?;
    grads.conv3.weight = gk;

    let mut g2 = gi.expect("input gradient");
    g2.add_scaled(grad_local, 1.0)?;
    relu_backward_inplace(&mut g2, &output.f_local);
    grads.conv2.bias = Tensor::from_vec(&[g2.shape()[0]], channel_sums(&g2))?;
    let (gi, gk) = conv2d_backward_cols(&g2, &cache.cols[1], &layers[1].weight, &cache.geometry[1], true)?;
    grads.conv2.weight = gk;

    let mut g1 = gi.expect("input gradient");
    relu_backward_inplace(&mut g1, &cache.stage1);
    grads.conv1.bias = Tensor::from_vec(&[g1.shape()[0]], channel_sums(&g1))?;
    let (_, gk) = conv2d_backward_cols(&g1, &cache.cols[0], &layers[0].weight, &cache.geometry[0], false)?;
    grads.conv1.weight = gk;
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Unit descriptor (or exactly zero when the projection vanishes).
    pub f_all: Vec<f64>,
    /// ‖z‖ before normalisation: the quality proxy.
    pub raw_norm: f64,
    pub z: Vec<f64>,
    pub concat: Vec<f64>,
}

pub fn head_from_pooled(pooled_local: &[f64], f_new: &[f64], params: &EncoderParams) -> Result<HeadOutput> {
    if pooled_local.len() != LOCAL_CHANNELS || f_new.len() != GLOBAL_CHANNELS {
        return Err(Error::Shape(format!(
            "head expects {LOCAL_CHANNELS}+{GLOBAL_CHANNELS} inputs, got {}+{}",
            pooled_local.len(),
            f_new.len()
        )));
    }
    let concat: Vec<f64> = pooled_local.iter().chain(f_new).copied().collect();
    let d = params.dim();
    let k = concat.len();
    let w = params.proj_weight.data();
    let z: Vec<f64> = (0..d)
        .map(|r| {
            w[r * k..(r + 1) * k].iter().zip(&concat).map(|(a, b)| a * b).sum::<f64>()
                + params.proj_bias.data()[r]
        })
        .collect();
    Ok(HeadOutput {
        f_all: l2_normalize(&z),
        raw_norm: l2_norm(&z),
        z,
        concat,
    })
}

pub fn head(output: &EncoderOutput, f_new: &[f64], params: &EncoderParams) -> Result<HeadOutput> {
    head_from_pooled(&global_avg_pool(&output.f_local)?, f_new, params)
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub pooled_local: Vec<f64>,
    pub f_new: Vec<f64>,
}

/// Backward through projection and normalisation given `∂L/∂f_all`.
pub fn head_backward(grad_f_all: &[f64], out: &HeadOutput, params: &EncoderParams) -> HeadGrads {
    let grad_z = l2_normalize_backward(&out.z, grad_f_all);
    head_backward_z(&grad_z, out, params)
}

pub(crate) fn head_backward_z(grad_z: &[f64], out: &HeadOutput, params: &EncoderParams) -> HeadGrads {
    let d = params.dim();
    let k = out.concat.len();
    let w = params.proj_weight.data();
    let mut gw = vec![0.0; d * k];
    let mut gc = vec![0.0; k];
    for r in 0..d {
        for c in 0..k {
            gw[r * k + c] = grad_z[r] * out.concat[c];
            gc[c] += w[r * k + c] * grad_z[r];
        }
    }
    HeadGrads {
        proj_weight: Tensor::from_vec(&[d, k], gw).expect("proj grad shape"),
        proj_bias: Tensor::from_vec(&[d], grad_z.to_vec()).expect("bias grad shape"),
        pooled_local: gc[..LOCAL_CHANNELS].to_vec(),
        f_new: gc[LOCAL_CHANNELS..].to_vec(),
    }
}

/// Spreads pooled gradients back onto a C×H×W map.
pub fn pooled_grad_to_map(grad: &[f64], like: &Tensor) -> Tensor {
    let s = like.shape();
    global_avg_pool_backward(grad, s[1], s[2])
}

/// Single-scale descriptor; `qcb` of `None` feeds the pooled global map
/// straight into the head.
pub fn describe(image: &Image, params: &EncoderParams, qcb: Option<&QcbParams>) -> Result<HeadOutput> {
    let out = forward(image, params)?;
    let f_new = match qcb {
        Some(q) => qcb_forward(&out.f_global, q)?.f_new,
        None => global_avg_pool(&out.f_global)?,
    };
    head(&out, &f_new, params)
}

/// Averages unit descriptors over `scales` and re-normalises the mean.
/// Scales whose resized side falls below 8 pixels are skipped.
pub fn multiscale_descriptor(
    image: &Image,
    params: &EncoderParams,
    qcb: Option<&QcbParams>,
    scales: &[f64],
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; params.dim()];
    let mut used = 0usize;
    for &s in scales {
        let h = (image.height() as f64 * s).round() as usize;
        let w = (image.width() as f64 * s).round() as usize;
        if h < MIN_SCALED_SIDE || w < MIN_SCALED_SIDE {
            log::warn!("skipping scale {s}: {h}×{w} is below {MIN_SCALED_SIDE} pixels");
            continue;
        }
        let resized = resize_bilinear(image, h, w)?;
        let unit = l2_normalize(&describe(&resized, params, qcb)?.f_all);
        for (a, v) in acc.iter_mut().zip(&unit) {
            *a += v;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(format!(
            "no scale in {scales:?} keeps a {}×{} image at least {MIN_SCALED_SIDE} pixels wide",
            image.height(),
            image.width()
        )));
    }
    for a in &mut acc {
        *a /= used as f64;
    }
    Ok(l2_normalize(&acc))
}
