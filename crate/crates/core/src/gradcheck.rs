//! Finite-difference verification of every hand-written backward pass.

use std::fmt::Write as _;

use crate::encoder::{self, EncoderParams};
use crate::error::Result;
use crate::losses::{info_nce, margin_loss, LossConfig, LossKind};
use crate::numerics::{conv2d, conv2d_backward, global_avg_pool, l2_normalize, Image, RngStream, Tensor};
use crate::qcb::{qcb_backward, qcb_forward, QcbParams};

pub const COMPONENTS: [&str; 7] = ["conv", "encoder", "qcb", "noiretrieval", "infonce", "normsoftmax", "adaface"];
/// Composite blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-4;
/// Standalone loss heads.
pub const HEAD_TOLERANCE: f64 = 1e-6;

/// Relative error with an absolute floor so near-zero gradients do not
/// amplify rounding noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub component: &'static str,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradcheckEntry::passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("component,worst_rel_err,tolerance,checked,status\n");
        for e in &self.entries {
            let status = if e.passed() { "pass" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{},{:.3e},{:.0e},{},{status}",
                e.component, e.worst_rel_err, e.tolerance, e.checked
            );
        }
        out
    }
}

/// Test hook: may alter the analytic gradient of a component before it is
/// compared.
pub type Hook<'a> = &'a dyn Fn(&str, &mut [f64]);

#[derive(Debug, Clone, Copy)]
enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`; small steps stay clear of ReLU kinks.
    Central(f64),
    /// Fourth-order five-point rule for smooth heads, where a larger step
    /// keeps rounding noise below the tolerance on tiny gradients.
    FivePoint(f64),
}

/// Compares `analytic[k]` against numeric derivatives of `loss` for the
/// coordinates in `coords`, perturbing through `set`.
fn compare<P: Clone>(
    base: &P,
    analytic: &[f64],
    coords: &[usize],
    stencil: Stencil,
    set: impl Fn(&mut P, usize, f64),
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let at = |k: usize, d: f64| {
        let mut p = base.clone();
        set(&mut p, k, d);
        loss(&p)
    };
    coords
        .iter()
        .map(|&k| {
            let numeric = match stencil {
                Stencil::Central(h) => (at(k, h) - at(k, -h)) / (2.0 * h),
                Stencil::FivePoint(h) => {
                    (8.0 * (at(k, h) - at(k, -h)) - (at(k, 2.0 * h) - at(k, -2.0 * h))) / (12.0 * h)
                }
            };
            rel_err(analytic[k], numeric)
        })
        .fold(0.0, f64::max)
}

fn random_tensor(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("shape")
}

/// Up to `per` evenly spaced indices below `n`.
fn sample(n: usize, per: usize) -> Vec<usize> {
    (0..n).step_by((n / per).max(1)).collect()
}

fn check_conv(rng: &mut RngStream, hook: Hook) -> Result<GradcheckEntry> {
    let x = random_tensor(&[2, 7, 7], rng, -1.0, 1.0);
    let k = random_tensor(&[3, 2, 3, 3], rng, -1.0, 1.0);
    let out = conv2d(&x, &k, 2, 1)?;
    let r = random_tensor(out.shape(), rng, -1.0, 1.0);
    let (gx, gk) = conv2d_backward(&r, &x, &k, 2, 1)?;
    let mut analytic = [gx.data(), gk.data()].concat();
    hook("conv", &mut analytic);
    let n = x.len();
    let both = (x.clone(), k.clone());
    let all: Vec<usize> = (0..analytic.len()).collect();
    let worst = compare(
        &both,
        &analytic,
        &all,
        Stencil::Central(1e-6),
        |p, i, d| {
            if i < n {
                p.0.data_mut()[i] += d
            } else {
                p.1.data_mut()[i - n] += d
            }
        },
        |p| conv2d(&p.0, &p.1, 2, 1).expect("conv").dot(&r),
    );
    Ok(GradcheckEntry {
        component: "conv",
        worst_rel_err: worst,
        tolerance: BLOCK_TOLERANCE,
        checked: all.len(),
    })
}

fn random_image(rng: &mut RngStream, side: usize) -> Image {
    Image::new(side, side, (0..side * side * 3).map(|_| rng.uniform()).collect()).expect("image")
}

fn check_encoder(rng: &mut RngStream, hook: Hook) -> Result<GradcheckEntry> {
    let mut params = EncoderParams::init(8, rng);
    // biases off zero keep flat patches away from the ReLU kink
    for b in [&mut params.conv1.bias, &mut params.conv2.bias, &mut params.conv3.bias] {
        *b = random_tensor(b.shape(), rng, -0.05, 0.05);
    }
    let img = random_image(rng, 16);
    let r: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let loss = |p: &EncoderParams| -> f64 {
        let out = encoder::describe(&img, p, None).expect("describe");
        out.f_all.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let enc = encoder::forward(&img, &params)?;
    let f_new = global_avg_pool(&enc.f_global)?;
    let head = encoder::head(&enc, &f_new, &params)?;
    let hg = encoder::head_backward(&r, &head, &params);
    let mut grads = encoder::backward(
        &encoder::pooled_grad_to_map(&hg.pooled_local, &enc.f_local),
        &encoder::pooled_grad_to_map(&hg.f_new, &enc.f_global),
        &enc,
        &params,
    )?;
    grads.proj_weight = hg.proj_weight;
    grads.proj_bias = hg.proj_bias;

    let named = grads.named();
    let mut offsets = Vec::new();
    let mut analytic = Vec::new();
    for (_, t) in &named {
        offsets.push(analytic.len());
        analytic.extend_from_slice(t.data());
    }
    hook("encoder", &mut analytic);
    let locate = |flat: usize| {
        let ti = offsets.iter().rposition(|&o| o <= flat).expect("offset");
        (ti, flat - offsets[ti])
    };
    let coords: Vec<usize> = named
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, t))| sample(t.len(), 6).into_iter().map(move |k| (ti, k)))
        .map(|(ti, k)| offsets[ti] + k)
        .collect();
    let worst = compare(
        &params,
        &analytic,
        &coords,
        Stencil::Central(1e-5),
        |p, flat, d| {
            let (ti, k) = locate(flat);
            p.named_mut()[ti].1.data_mut()[k] += d;
        },
        loss,
    );
    Ok(GradcheckEntry {
        component: "encoder",
        worst_rel_err: worst,
        tolerance: BLOCK_TOLERANCE,
        checked: coords.len(),
    })
}

fn check_qcb(rng: &mut RngStream, hook: Hook) -> Result<GradcheckEntry> {
    let mut params = QcbParams::init(rng);
    params.comp_bias = random_tensor(params.comp_bias.shape(), rng, -0.2, 0.2);
    params.fuse_weight = random_tensor(params.fuse_weight.shape(), rng, -0.2, 0.2);
    params.fuse_bias = random_tensor(params.fuse_bias.shape(), rng, -0.2, 0.2);
    let f_low = random_tensor(&[64, 3, 3], rng, 0.0, 1.0);
    let r: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
    let out = qcb_forward(&f_low, &params)?;
    let (grads, grad_low) = qcb_backward(&r, &out.cache, &params)?;

    let named = grads.named();
    let mut offsets = Vec::new();
    let mut analytic = Vec::new();
    for (_, t) in &named {
        offsets.push(analytic.len());
        analytic.extend_from_slice(t.data());
    }
    let input_offset = analytic.len();
    analytic.extend_from_slice(grad_low.data());
    hook("qcb", &mut analytic);

    let mut coords: Vec<usize> = Vec::new();
    for (ti, (_, t)) in named.iter().enumerate() {
        coords.extend(sample(t.len(), 6).into_iter().map(|k| offsets[ti] + k));
    }
    coords.extend(sample(f_low.len(), 12).into_iter().map(|k| input_offset + k));
    let state = (params.clone(), f_low.clone());
    let worst = compare(
        &state,
        &analytic,
        &coords,
        Stencil::Central(1e-5),
        |p, flat, d| {
            if flat >= input_offset {
                p.1.data_mut()[flat - input_offset] += d;
            } else {
                let ti = offsets.iter().rposition(|&o| o <= flat).expect("offset");
                p.0.named_mut()[ti].1.data_mut()[flat - offsets[ti]] += d;
            }
        },
        |p| {
            let out = qcb_forward(&p.1, &p.0).expect("qcb");
            out.f_new.iter().zip(&r).map(|(a, b)| a * b).sum()
        },
    );
    Ok(GradcheckEntry {
        component: "qcb",
        worst_rel_err: worst,
        tolerance: BLOCK_TOLERANCE,
        checked: coords.len(),
    })
}

fn check_margin(component: &'static str, kind: LossKind, rng: &mut RngStream, hook: Hook) -> Result<GradcheckEntry> {
    let cos = random_tensor(&[4, 6], rng, -0.95, 0.95);
    let labels: Vec<usize> = (0..4).map(|_| rng.below(6) as usize).collect();
    let desc: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
    let cfg = LossConfig {
        s: 8.0,
        ..LossConfig::default()
    };
    let mut analytic = margin_loss(kind, &cos, &labels, &desc, &cfg)?.grad_cos.into_data();
    hook(component, &mut analytic);
    let all: Vec<usize> = (0..cos.len()).collect();
    let worst = compare(
        &cos,
        &analytic,
        &all,
        Stencil::FivePoint(1e-3),
        |p, k, d| p.data_mut()[k] += d,
        |p| margin_loss(kind, p, &labels, &desc, &cfg).expect("margin loss").loss,
    );
    Ok(GradcheckEntry {
        component,
        worst_rel_err: worst,
        tolerance: HEAD_TOLERANCE,
        checked: all.len(),
    })
}

fn unit_rows(n: usize, d: usize, rng: &mut RngStream) -> Tensor {
    let data = (0..n)
        .flat_map(|_| l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()))
        .collect();
    Tensor::from_vec(&[n, d], data).expect("shape")
}

fn check_infonce(rng: &mut RngStream, hook: Hook) -> Result<GradcheckEntry> {
    let a = unit_rows(4, 5, rng);
    let p = unit_rows(4, 5, rng);
    let tau = 0.5;
    let out = info_nce(&a, &p, tau)?;
    let mut analytic = [out.grad_anchors.data(), out.grad_positives.data()].concat();
    hook("infonce", &mut analytic);
    let n = a.len();
    let all: Vec<usize> = (0..analytic.len()).collect();
    let worst = compare(
        &(a, p),
        &analytic,
        &all,
        Stencil::FivePoint(1e-3),
        |s, k, d| {
            if k < n {
                s.0.data_mut()[k] += d
            } else {
                s.1.data_mut()[k - n] += d
            }
        },
        |s| info_nce(&s.0, &s.1, tau).expect("infonce").loss,
    );
    Ok(GradcheckEntry {
        component: "infonce",
        worst_rel_err: worst,
        tolerance: HEAD_TOLERANCE,
        checked: all.len(),
    })
}

pub fn run(seed: u64) -> Result<GradcheckReport> {
    run_with_hook(seed, &|_, _| {})
}

pub fn run_with_hook(seed: u64, hook: Hook) -> Result<GradcheckReport> {
    let root = RngStream::derive(seed, "gradcheck");
    let rng = |name: &str| root.fork(name, 0);
    let entries = vec![
        check_conv(&mut rng("conv"), hook)?,
        check_encoder(&mut rng("encoder"), hook)?,
        check_qcb(&mut rng("qcb"), hook)?,
        check_margin("noiretrieval", LossKind::NoiRetrieval, &mut rng("noiretrieval"), hook)?,
        check_infonce(&mut rng("infonce"), hook)?,
        check_margin("normsoftmax", LossKind::NormSoftmax, &mut rng("normsoftmax"), hook)?,
        check_margin("adaface", LossKind::AdaFace, &mut rng("adaface"), hook)?,
    ];
    Ok(GradcheckReport { entries })
}
