//! The eight deterministic corruption functions used to build low-quality
//! counterparts of clean images.
//!
//! Every corruption is a pure function of `(image, kind, severity, seed)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{resize_bilinear, Image, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorruptionKind {
    GaussianNoise,
    SaltPepper,
    GaussianBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Downscale,
    BlockCompress,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::SaltPepper,
        CorruptionKind::GaussianBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Downscale,
        CorruptionKind::BlockCompress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "GaussianNoise",
            CorruptionKind::SaltPepper => "SaltPepper",
            CorruptionKind::GaussianBlur => "GaussianBlur",
            CorruptionKind::MotionBlur => "MotionBlur",
            CorruptionKind::Brightness => "Brightness",
            CorruptionKind::Contrast => "Contrast",
            CorruptionKind::Downscale => "Downscale",
            CorruptionKind::BlockCompress => "BlockCompress",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = CorruptionSpec {
            kind,
            severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!(
                "severity {} outside 1..=5",
                self.severity
            )));
        }
        Ok(())
    }
}

pub fn apply_corruption(image: &Image, spec: &CorruptionSpec) -> Result<Image> {
    spec.validate()?;
    let s = f64::from(spec.severity);
    let mut rng = RngStream::derive(spec.seed, spec.kind.name());
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => gaussian_noise(image, 0.02 * s, &mut rng),
        CorruptionKind::SaltPepper => salt_pepper(image, 0.01 * s, &mut rng),
        CorruptionKind::GaussianBlur => gaussian_blur(image, 0.5 * s),
        CorruptionKind::MotionBlur => {
            let angle = rng.uniform() * std::f64::consts::PI;
            motion_blur(image, spec.severity as usize, angle)
        }
        CorruptionKind::Brightness => {
            let magnitude = rng.uniform_range(0.08 * s, 0.12 * s);
            let delta = if rng.coin() { magnitude } else { -magnitude };
            map_pixels(image, |v| v + delta)
        }
        CorruptionKind::Contrast => {
            let c = 1.0 - 0.15 * s;
            map_pixels(image, |v| 0.5 + c * (v - 0.5))
        }
        CorruptionKind::Downscale => downscale(image, 1.0 + 0.5 * s)?,
        CorruptionKind::BlockCompress => block_compress(image, 0.02 * s),
    };
    out.clamp_unit();
    Ok(out)
}

/// Applies `specs` left to right.
pub fn apply_all(image: &Image, specs: &[CorruptionSpec]) -> Result<Image> {
    specs
        .iter()
        .try_fold(image.clone(), |img, spec| apply_corruption(&img, spec))
}

/// Draws one or two distinct kinds with uniform severities and composes them
/// in draw order. The clean output is the untouched input.
pub fn make_pair(image: &Image, rng: &mut RngStream) -> Result<(Image, Image, Vec<CorruptionSpec>)> {
    let specs = draw_specs(rng);
    let corrupted = apply_all(image, &specs)?;
    Ok((image.clone(), corrupted, specs))
}

pub fn draw_specs(rng: &mut RngStream) -> Vec<CorruptionSpec> {
    let count = 1 + rng.below(2) as usize;
    let mut kinds = CorruptionKind::ALL.to_vec();
    (0..count)
        .map(|_| {
            let kind = kinds.remove(rng.below(kinds.len() as u64) as usize);
            let severity = 1 + rng.below(5) as u8;
            CorruptionSpec {
                kind,
                severity,
                seed: rng.next_u64(),
            }
        })
        .collect()
}

fn map_pixels(image: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn gaussian_noise(image: &Image, sigma: f64, rng: &mut RngStream) -> Image {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v += sigma * rng.normal();
    }
    out
}

fn salt_pepper(image: &Image, prob: f64, rng: &mut RngStream) -> Image {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        if rng.uniform() < prob {
            let v = if rng.coin() { 1.0 } else { 0.0 };
            px.fill(v);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable filtering with edge replication.
fn separable(image: &Image, kernel: &[f64]) -> Image {
    let (h, w) = (image.height(), image.width());
    let r = (kernel.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Image::constant(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * image.get(y, clampi(x as i64 + i as i64 - r, w), c))
                    .sum();
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = Image::constant(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp.get(clampi(y as i64 + i as i64 - r, h), x, c))
                    .sum();
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    separable(image, &gaussian_kernel(sigma))
}

/// Bilinear sample with coordinates clamped to the image.
fn sample(image: &Image, y: f64, x: f64, c: usize) -> f64 {
    let y = y.clamp(0.0, (image.height() - 1) as f64);
    let x = x.clamp(0.0, (image.width() - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let y1 = (y0 + 1).min(image.height() - 1);
    let x1 = (x0 + 1).min(image.width() - 1);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = image.get(y0, x0, c) + fx * (image.get(y0, x1, c) - image.get(y0, x0, c));
    let bot = image.get(y1, x0, c) + fx * (image.get(y1, x1, c) - image.get(y1, x0, c));
    top + fy * (bot - top)
}

/// Box kernel of length `2·half + 1` along `angle` (radians).
fn motion_blur(image: &Image, half: usize, angle: f64) -> Image {
    let (dy, dx) = angle.sin_cos();
    let taps = 2 * half + 1;
    let mut out = Image::constant(image.height(), image.width(), 0.0);
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..3 {
                let mut acc = 0.0;
                for t in 0..taps {
                    let off = t as f64 - half as f64;
                    acc += sample(image, y as f64 + off * dy, x as f64 + off * dx, c);
                }
                out.set(y, x, c, acc / taps as f64);
            }
        }
    }
    out
}

fn downscale(image: &Image, factor: f64) -> Result<Image> {
    let sh = (image.height() as f64 / factor).ceil() as usize;
    let sw = (image.width() as f64 / factor).ceil() as usize;
    let small = resize_bilinear(image, sh.max(1), sw.max(1))?;
    resize_bilinear(&small, image.height(), image.width())
}

const BLOCK: usize = 8;

/// Orthonormal DCT-II basis: `basis[u][x]`.
fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut b = [[0.0; BLOCK]; BLOCK];
    for (u, row) in b.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0 / BLOCK as f64).sqrt()
        } else {
            (2.0 / BLOCK as f64).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha
                * ((std::f64::consts::PI * (2 * x + 1) as f64 * u as f64) / (2 * BLOCK) as f64)
                    .cos();
        }
    }
    b
}

/// Per 8×8 block and channel: DCT, quantize coefficient (u, v) with step
/// `base_step·(1 + u + v)`, inverse DCT. Partial edge blocks are padded by
/// edge replication. `base_step == 0` skips quantization.
pub(crate) fn block_compress(image: &Image, base_step: f64) -> Image {
    let basis = dct_basis();
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    let mut block = [[0.0; BLOCK]; BLOCK];
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            for c in 0..3 {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = image.get((by + y).min(h - 1), (bx + x).min(w - 1), c);
                    }
                }
                // forward: coef = B · block · Bᵀ
                for u in 0..BLOCK {
                    for x in 0..BLOCK {
                        tmp[u][x] = (0..BLOCK).map(|y| basis[u][y] * block[y][x]).sum();
                    }
                }
                let mut coef = [[0.0; BLOCK]; BLOCK];
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let val: f64 = (0..BLOCK).map(|x| tmp[u][x] * basis[v][x]).sum();
                        let step = base_step * (1 + u + v) as f64;
                        coef[u][v] = if step > 0.0 {
                            (val / step).round() * step
                        } else {
                            val
                        };
                    }
                }
                // inverse: block = Bᵀ · coef · B
                for y in 0..BLOCK {
                    for v in 0..BLOCK {
                        tmp[y][v] = (0..BLOCK).map(|u| basis[u][y] * coef[u][v]).sum();
                    }
                }
                for y in 0..BLOCK.min(h - by) {
                    for x in 0..BLOCK.min(w - bx) {
                        let val: f64 = (0..BLOCK).map(|v| tmp[y][v] * basis[v][x]).sum();
                        out.set(by + y, bx + x, c, val);
                    }
                }
            }
        }
    }
    out
}
