//! Grid of the gradient scaling term over angle and quality.
//!
//! Each row fixes a two-class problem: the target at angle θ and the single
//! non-target at π − θ. `P_target` is the softmax probability of that
//! problem evaluated at quality 0, so it depends on θ alone and every cell
//! in a row shares it; only the `cos(q)` factor varies along a row.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{gst_noiretrieval, noiretrieval_logits, softmax_probs, LossConfig};
use crate::numerics::Tensor;

pub const THETA_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GstCell {
    pub theta: f64,
    pub desc: f64,
    pub p_target: f64,
    pub g: f64,
}

/// Target probability of the two-class problem at angle `theta`.
pub fn two_class_p_target(theta: f64, cfg: &LossConfig) -> Result<f64> {
    let cos = Tensor::from_vec(&[1, 2], vec![theta.cos(), (std::f64::consts::PI - theta).cos()])?;
    let logits = noiretrieval_logits(&cos, &[0], &[0.0], cfg)?;
    Ok(softmax_probs(&logits)?.data()[0])
}

/// θ over `[0.05, π − 0.05]`, quality over `[0, 1]`, both inclusive.
pub fn gst_map(cfg: &LossConfig, theta_steps: usize, desc_steps: usize) -> Result<Vec<GstCell>> {
    if theta_steps < 2 || desc_steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 2 steps per axis, got {theta_steps}×{desc_steps}"
        )));
    }
    cfg.validate()?;
    let span = std::f64::consts::PI - 2.0 * THETA_MARGIN;
    let mut cells = Vec::with_capacity(theta_steps * desc_steps);
    for i in 0..theta_steps {
        let theta = THETA_MARGIN + span * i as f64 / (theta_steps - 1) as f64;
        let p = two_class_p_target(theta, cfg)?;
        for j in 0..desc_steps {
            let desc = j as f64 / (desc_steps - 1) as f64;
            let g = gst_noiretrieval(p, theta.cos(), desc, cfg).value;
            cells.push(GstCell {
                theta,
                desc,
                p_target: p,
                g,
            });
        }
    }
    Ok(cells)
}

pub fn gst_map_csv(cells: &[GstCell]) -> String {
    let mut out = String::from("theta,desc,P_target,g,abs_g\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{},{},{}", c.theta, c.desc, c.p_target, c.g, c.g.abs());
    }
    out
}

pub fn write_gst_map(cfg: &LossConfig, theta_steps: usize, desc_steps: usize, out: &Path) -> Result<Vec<GstCell>> {
    let cells = gst_map(cfg, theta_steps, desc_steps)?;
    std::fs::write(out, gst_map_csv(&cells)).map_err(|e| Error::io(out, e))?;
    Ok(cells)
}
