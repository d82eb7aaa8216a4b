use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

/// H×W×3 image with intensities in [0, 1], stored row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}×{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// 3×H×W tensor view for the encoder.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out).expect("chw shape")
    }

    pub fn mean_squared_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        // single whitespace byte separates header from raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Format(format!("not a P6 PPM (magic {:?})", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let need = width * height * 3;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
        Image::new(
            height,
            width,
            raster.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes)
    }
}

/// Corner-aligned source coordinate for output index `i` of `out` samples
/// over `src` input samples.
fn source_coord(i: usize, out: usize, src: usize) -> f64 {
    if out == 1 {
        (src - 1) as f64 / 2.0
    } else {
        (i * (src - 1)) as f64 / (out - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling; output clamped to [0, 1].
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}×{out_w} must be at least 1×1"
        )));
    }
    let (h, w) = (image.height, image.width);
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let sx = source_coord(x, out_w, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            (x0, (x0 + 1).min(w - 1), sx - x0 as f64)
        })
        .collect();
    let mut out = vec![0.0; out_h * out_w * 3];
    for y in 0..out_h {
        let sy = source_coord(y, out_h, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                // lerp form keeps constants and identity resizes exact
                let p00 = image.get(y0, x0, c);
                let p01 = image.get(y0, x1, c);
                let p10 = image.get(y1, x0, c);
                let p11 = image.get(y1, x1, c);
                let top = p00 + fx * (p01 - p00);
                let bot = p10 + fx * (p11 - p10);
                out[(y * out_w + x) * 3 + c] = (top + fy * (bot - top)).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out_h, out_w, out)
}
