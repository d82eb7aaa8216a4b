//! Objective functions: the batch quality descriptor, quality-aware margin
//! softmax heads, their gradient scaling term, and InfoNCE.
//!
//! Margin heads share one structure. Non-target logits are `s·cos θⱼ`; the
//! target logit `f(cos θ_y)` depends on the variant:
//!
//! | variant        | target logit                                    |
//! |----------------|-------------------------------------------------|
//! | normalized     | `s·cos θ`                                       |
//! | noiretrieval   | `s·cos(q)·cos(θ + m)`                           |
//! | adaface        | `s·(cos(θ + g_ang·m) − g_add·m)`                |
//!
//! where `q ∈ [0, 1]` is the per-sample quality descriptor. The descriptor
//! is treated as a constant when differentiating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, l2_normalize, l2_normalize_backward, RngStream, Tensor};

/// Clamp applied before `arccos` so exact alignment never yields NaN.
pub const ACOS_CLAMP: f64 = 1e-9;
/// Clamp applied to `cos θ` inside the gradient scaling term.
pub const GST_CLAMP: f64 = 1e-6;
/// Batch norm spread below which every descriptor is set to 0.5.
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub s: f64,
    pub m: f64,
    pub h: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            s: 30.0,
            m: 0.15,
            h: 0.33,
            tau: 1.0,
            alpha: 0.2,
            beta: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s > 0.0
            && (0.0..std::f64::consts::FRAC_PI_2).contains(&self.m)
            && self.h > 0.0
            && self.tau > 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid loss config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(rename = "noiretrieval")]
    NoiRetrieval,
    #[serde(rename = "adaface")]
    AdaFace,
    #[serde(rename = "normsoftmax")]
    NormSoftmax,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noiretrieval" => Ok(LossKind::NoiRetrieval),
            "adaface" => Ok(LossKind::AdaFace),
            "normsoftmax" => Ok(LossKind::NormSoftmax),
            other => Err(Error::InvalidArgument(format!("unknown loss {other:?}"))),
        }
    }
}

/// Class weight columns `W` (d × C), used only through their unit
/// normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
}

impl ClassifierHead {
    pub fn init(dim: usize, classes: usize, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs d ≥ 1 and at least 2 classes, got d={dim}, C={classes}"
            )));
        }
        let weight = Tensor::from_vec(&[dim, classes], (0..dim * classes).map(|_| rng.normal()).collect())?;
        let mut head = ClassifierHead { weight };
        head.renormalize();
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    fn column(&self, j: usize) -> Vec<f64> {
        let c = self.classes();
        (0..self.dim()).map(|r| self.weight.data()[r * c + j]).collect()
    }

    /// Column-normalised copy of `W`.
    pub fn normalized(&self) -> Tensor {
        let c = self.classes();
        let mut out = self.weight.clone();
        for j in 0..c {
            let unit = l2_normalize(&self.column(j));
            for (r, u) in unit.into_iter().enumerate() {
                out.data_mut()[r * c + j] = u;
            }
        }
        out
    }

    pub fn renormalize(&mut self) {
        self.weight = self.normalized();
    }

    /// `cos θ_ij = f_i · Ŵ_j` for unit rows `f_i` of an N×d matrix.
    pub fn cosines(&self, features: &Tensor) -> Result<Tensor> {
        let n = self.check_features(features)?;
        let (d, c) = (self.dim(), self.classes());
        let mut out = vec![0.0; n * c];
        gemm(n, d, c, features.data(), false, self.normalized().data(), false, 0.0, &mut out);
        Tensor::from_vec(&[n, c], out)
    }

    /// Returns `(∂L/∂W, ∂L/∂features)` given `∂L/∂cosines`, chaining through
    /// the column normalisation.
    pub fn backward(&self, grad_cos: &Tensor, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = self.check_features(features)?;
        let (d, c) = (self.dim(), self.classes());
        if grad_cos.shape() != [n, c] {
            return Err(Error::Shape(format!("cosine gradient {:?}, expected [{n}, {c}]", grad_cos.shape())));
        }
        let w_hat = self.normalized();
        let mut grad_f = vec![0.0; n * d];
        gemm(n, c, d, grad_cos.data(), false, w_hat.data(), true, 0.0, &mut grad_f);
        let mut grad_hat = vec![0.0; d * c];
        gemm(d, n, c, features.data(), true, grad_cos.data(), false, 0.0, &mut grad_hat);
        let mut grad_w = vec![0.0; d * c];
        for j in 0..c {
            let g: Vec<f64> = (0..d).map(|r| grad_hat[r * c + j]).collect();
            for (r, v) in l2_normalize_backward(&self.column(j), &g).into_iter().enumerate() {
                grad_w[r * c + j] = v;
            }
        }
        Ok((Tensor::from_vec(&[d, c], grad_w)?, Tensor::from_vec(&[n, d], grad_f)?))
    }

    fn check_features(&self, features: &Tensor) -> Result<usize> {
        match features.shape() {
            &[n, d] if d == self.dim() => Ok(n),
            s => Err(Error::Shape(format!(
                "features {s:?} do not match classifier dimension {}",
                self.dim()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityBatch {
    pub norms: Vec<f64>,
    pub mean: f64,
    /// population standard deviation
    pub std: f64,
    pub desc: Vec<f64>,
}

/// `desc_i = (clip((‖z_i‖ − μ)/(σ/h), −1, 1) + 1) / 2` over the batch.
pub fn quality_descriptor(norms: &[f64], h: f64) -> Result<QualityBatch> {
    if norms.is_empty() {
        return Err(Error::InvalidArgument("quality descriptor of an empty batch".into()));
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let std = (norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let desc = if std < SIGMA_FLOOR {
        vec![0.5; norms.len()]
    } else {
        norms
            .iter()
            .map(|x| (((x - mean) / (std / h)).clamp(-1.0, 1.0) + 1.0) / 2.0)
            .collect()
    };
    Ok(QualityBatch {
        norms: norms.to_vec(),
        mean,
        std,
        desc,
    })
}

fn theta_of(cos: f64) -> f64 {
    cos.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP).acos()
}

/// Target logit and its derivative with respect to `cos θ_y`.
fn target_logit(kind: LossKind, cos: f64, desc: f64, cfg: &LossConfig) -> (f64, f64) {
    let s = cfg.s;
    match kind {
        LossKind::NormSoftmax => (s * cos, s),
        LossKind::NoiRetrieval => {
            let theta = theta_of(cos);
            let q = desc.cos();
            let value = s * q * (theta + cfg.m).cos();
            let deriv = s * q * (theta + cfg.m).sin() / theta.sin();
            (value, deriv)
        }
        LossKind::AdaFace => {
            let theta = theta_of(cos);
            let centered = 2.0 * desc - 1.0;
            let g_ang = -centered;
            let g_add = centered + 1.0;
            let shifted = theta + g_ang * cfg.m;
            let value = s * (shifted.cos() - g_add * cfg.m);
            let deriv = s * shifted.sin() / theta.sin();
            (value, deriv)
        }
    }
}

fn check_inputs(cosines: &Tensor, labels: &[usize], desc: Option<&[f64]>) -> Result<(usize, usize)> {
    let (n, c) = match cosines.shape() {
        &[n, c] => (n, c),
        s => return Err(Error::Shape(format!("cosines must be N×C, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{c}")));
    }
    if let Some(d) = desc {
        if d.len() != n {
            return Err(Error::Shape(format!("{} descriptors for {n} rows", d.len())));
        }
    }
    Ok((n, c))
}

fn margin_logits(kind: LossKind, cosines: &Tensor, labels: &[usize], desc: &[f64], cfg: &LossConfig) -> Result<Tensor> {
    let (_, c) = check_inputs(cosines, labels, Some(desc))?;
    let mut out = cosines.clone();
    out.scale(cfg.s);
    for (i, &y) in labels.iter().enumerate() {
        out.data_mut()[i * c + y] = target_logit(kind, cosines.data()[i * c + y], desc[i], cfg).0;
    }
    Ok(out)
}

/// Quality-scaled additive angular margin logits.
pub fn noiretrieval_logits(cosines: &Tensor, labels: &[usize], desc: &[f64], cfg: &LossConfig) -> Result<Tensor> {
    margin_logits(LossKind::NoiRetrieval, cosines, labels, desc, cfg)
}

/// Adaptive-margin baseline with `g_ang = −(2q−1)`, `g_add = 2q`.
pub fn adaface_logits(cosines: &Tensor, labels: &[usize], desc: &[f64], cfg: &LossConfig) -> Result<Tensor> {
    margin_logits(LossKind::AdaFace, cosines, labels, desc, cfg)
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    let c = match logits.shape() {
        &[_, c] => c,
        s => return Err(Error::Shape(format!("logits must be N×C, got {s:?}"))),
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub probs: Tensor,
    /// ∂loss/∂logits = (P − onehot)/N
    pub grad: Tensor,
}

/// Mean negative log-likelihood of the labelled column.
pub fn noiretrieval_loss(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    let (n, c) = check_inputs(logits, labels, None)?;
    let probs = softmax_probs(logits)?;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.data_mut()[i * c + y] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok(CrossEntropy {
        loss: loss / n as f64,
        probs,
        grad,
    })
}

#[derive(Debug, Clone)]
pub struct MarginLoss {
    pub loss: f64,
    pub logits: Tensor,
    pub probs: Tensor,
    /// ∂loss/∂cosines
    pub grad_cos: Tensor,
}

/// Assembled margin head: logits, cross-entropy and the chain back to the
/// cosines. `desc` is ignored by the normalized-softmax variant.
pub fn margin_loss(kind: LossKind, cosines: &Tensor, labels: &[usize], desc: &[f64], cfg: &LossConfig) -> Result<MarginLoss> {
    let logits = margin_logits(kind, cosines, labels, desc, cfg)?;
    let ce = noiretrieval_loss(&logits, labels)?;
    let (_, c) = check_inputs(cosines, labels, Some(desc))?;
    let mut grad_cos = ce.grad.clone();
    grad_cos.scale(cfg.s);
    for (i, &y) in labels.iter().enumerate() {
        let deriv = target_logit(kind, cosines.data()[i * c + y], desc[i], cfg).1;
        grad_cos.data_mut()[i * c + y] = ce.grad.data()[i * c + y] * deriv;
    }
    Ok(MarginLoss {
        loss: ce.loss,
        logits,
        probs: ce.probs,
        grad_cos,
    })
}

/// Normalized softmax: no margin, no quality term.
pub fn normalized_softmax_loss(cosines: &Tensor, labels: &[usize], s: f64) -> Result<MarginLoss> {
    let n = labels.len();
    let cfg = LossConfig {
        s,
        ..LossConfig::default()
    };
    margin_loss(LossKind::NormSoftmax, cosines, labels, &vec![0.0; n], &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gst {
    pub value: f64,
    /// `cos θ` was within 1e-6 of ±1 and got clamped.
    pub clamped: bool,
}

/// Gradient scaling term of the quality-scaled margin head:
/// `g = (P − 1)·cos(q)·(cos m + cos θ·sin m / √(1 − cos²θ))·s`.
pub fn gst_noiretrieval(p_target: f64, cos_theta: f64, desc: f64, cfg: &LossConfig) -> Gst {
    let limit = 1.0 - GST_CLAMP;
    let clamped = cos_theta.abs() > limit;
    let c = cos_theta.clamp(-limit, limit);
    let value = (p_target - 1.0)
        * desc.cos()
        * (cfg.m.cos() + c * cfg.m.sin() / (1.0 - c * c).sqrt())
        * cfg.s;
    Gst { value, clamped }
}

#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_anchors: Tensor,
    pub grad_positives: Tensor,
}

/// `L = −(1/N) Σᵢ log softmaxⱼ(aᵢ·pⱼ/τ)[i]` over unit rows.
pub fn info_nce(anchors: &Tensor, positives: &Tensor, tau: f64) -> Result<InfoNce> {
    anchors.check_same_shape(positives)?;
    let (n, d) = match anchors.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::Shape(format!("InfoNCE rows must be N×d, got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::InvalidArgument(format!("InfoNCE needs at least 2 pairs, got {n}")));
    }
    let a = anchors.data();
    let p = positives.data();
    let mut sim = vec![0.0; n * n];
    crate::numerics::gemm(n, d, n, a, false, p, true, 0.0, &mut sim);
    for v in &mut sim {
        *v /= tau;
    }
    let mut loss = 0.0;
    // dS[i][j] = (softmax_ij − δ_ij)/N
    let mut ds = vec![0.0; n * n];
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + total.ln() - row[i];
        for j in 0..n {
            ds[i * n + j] = (row[j] - max).exp() / total / n as f64;
        }
        ds[i * n + i] -= 1.0 / n as f64;
    }
    let mut ga = vec![0.0; n * d];
    let mut gp = vec![0.0; n * d];
    crate::numerics::gemm(n, n, d, &ds, false, p, false, 0.0, &mut ga);
    crate::numerics::gemm(n, n, d, &ds, true, a, false, 0.0, &mut gp);
    for v in ga.iter_mut().chain(gp.iter_mut()) {
        *v /= tau;
    }
    Ok(InfoNce {
        loss: loss / n as f64,
        grad_anchors: Tensor::from_vec(&[n, d], ga)?,
        grad_positives: Tensor::from_vec(&[n, d], gp)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use crate::numerics::l2_norm;
    use proptest::prelude::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn random_cosines(n: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.uniform_range(-0.95, 0.95)).collect()).unwrap()
    }

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        let mut data = Vec::new();
        for _ in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            data.extend(l2_normalize(&v));
        }
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn descriptor_equal_norms() {
        let q = quality_descriptor(&[2.5; 6], 0.33).unwrap();
        assert_eq!(q.desc, vec![0.5; 6]);
    }

    #[test]
    fn descriptor_worked_example() {
        let q = quality_descriptor(&[1.0, 2.0, 3.0], 0.33).unwrap();
        assert_eq!(q.mean, 2.0);
        assert!((q.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let expect = [0.2979, 0.5, 0.7021];
        for (d, e) in q.desc.iter().zip(expect) {
            assert!((d - e).abs() < 5e-5, "{d} vs {e}");
        }
    }

    #[test]
    fn descriptor_saturation() {
        // μ = 0.5, σ = 0.5 over {0,1,0,1}; σ/h = 0.5/0.33
        let q = quality_descriptor(&[0.0, 1.0, 0.0, 1.0, 0.5], 0.33).unwrap();
        let band = q.std / 0.33;
        for (x, d) in q.norms.iter().zip(&q.desc) {
            if *x >= q.mean + band {
                assert_eq!(*d, 1.0);
            }
            if *x <= q.mean - band {
                assert_eq!(*d, 0.0);
            }
        }
        let q = quality_descriptor(&[0.0, 10.0, 5.0, 5.0, 5.0], 2.0).unwrap();
        assert_eq!(q.desc[0], 0.0);
        assert_eq!(q.desc[1], 1.0);
    }

    #[test]
    fn descriptor_empty_batch_rejected() {
        assert!(quality_descriptor(&[], 0.33).is_err());
    }

    proptest! {
        #[test]
        fn descriptor_properties(norms in proptest::collection::vec(0.01f64..50.0, 2..20),
                                 idx in 0usize..20, bump in 0.0f64..5.0, k in 0.1f64..10.0) {
            let q = quality_descriptor(&norms, 0.33).unwrap();
            prop_assert!(q.desc.iter().all(|d| (0.0..=1.0).contains(d)));
            // scale invariance
            let scaled: Vec<f64> = norms.iter().map(|x| x * k).collect();
            let qs = quality_descriptor(&scaled, 0.33).unwrap();
            for (a, b) in q.desc.iter().zip(&qs.desc) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // monotone in the sample's own norm
            let i = idx % norms.len();
            let mut raised = norms.clone();
            raised[i] += bump;
            let qr = quality_descriptor(&raised, 0.33).unwrap();
            if q.std >= SIGMA_FLOOR && qr.std >= SIGMA_FLOOR {
                prop_assert!(qr.desc[i] >= q.desc[i] - 1e-12);
            }
        }
    }

    #[test]
    fn noiretrieval_zero_quality_is_additive_angular_margin() {
        let cos = random_cosines(4, 5, 1);
        let labels = [0, 3, 4, 1];
        let logits = noiretrieval_logits(&cos, &labels, &[0.0; 4], &cfg()).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let theta = cos.data()[i * 5 + y].acos();
            assert!((logits.data()[i * 5 + y] - 30.0 * (theta + 0.15).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn noiretrieval_non_target_independent_of_quality() {
        let cos = random_cosines(3, 4, 2);
        let labels = [2, 0, 1];
        let a = noiretrieval_logits(&cos, &labels, &[0.0, 0.3, 1.0], &cfg()).unwrap();
        let b = noiretrieval_logits(&cos, &labels, &[1.0, 0.9, 0.1], &cfg()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                if j != labels[i] {
                    assert_eq!(a.data()[i * 4 + j], 30.0 * cos.data()[i * 4 + j]);
                    assert_eq!(a.data()[i * 4 + j], b.data()[i * 4 + j]);
                }
            }
        }
    }

    #[test]
    fn noiretrieval_worked_value() {
        let cos = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let logits = noiretrieval_logits(&cos, &[0], &[1.0], &cfg()).unwrap();
        // θ is the arccos of 1 − 1e-9, not exactly zero
        let theta = (1.0f64 - ACOS_CLAMP).acos();
        assert!((logits.data()[0] - 30.0 * 1f64.cos() * (theta + 0.15).cos()).abs() < 1e-12);
        assert!((logits.data()[0] - 16.027).abs() < 5e-4);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let cos = random_cosines(2, 3, 3);
        assert!(noiretrieval_logits(&cos, &[0, 3], &[0.5, 0.5], &cfg()).is_err());
        assert!(adaface_logits(&cos, &[0, 5], &[0.5, 0.5], &cfg()).is_err());
    }

    #[test]
    fn target_logit_decreases_with_quality() {
        for theta in [0.1, 0.4, 0.8, 1.2] {
            let c = f64::cos(theta);
            let cos = Tensor::from_vec(&[1, 2], vec![c, 0.0]).unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..=20 {
                let q = k as f64 / 20.0;
                let v = noiretrieval_logits(&cos, &[0], &[q], &cfg()).unwrap().data()[0];
                assert!(v < prev);
                prev = v;
            }
        }
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let p = softmax_probs(&Tensor::full(&[2, 4], 3.0)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut rng = RngStream::new(5);
        let row: Vec<f64> = (0..6).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let base = softmax_probs(&Tensor::from_vec(&[1, 6], row.clone()).unwrap()).unwrap();
        let shifted = softmax_probs(&Tensor::from_vec(&[1, 6], row.iter().map(|v| v + 17.5).collect()).unwrap()).unwrap();
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        for (j, (a, b)) in base.data().iter().zip(shifted.data()).enumerate() {
            assert!((a - b).abs() < 1e-12);
            assert!((a - row[j].exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturation_and_ln2() {
        let l = noiretrieval_loss(&Tensor::from_vec(&[1, 2], vec![50.0, 0.0]).unwrap(), &[0]).unwrap();
        assert!(l.loss < 1e-20);
        let l = noiretrieval_loss(&Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap(), &[1]).unwrap();
        assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn fd_logits_check(logits: &Tensor, labels: &[usize]) -> f64 {
        let ce = noiretrieval_loss(logits, labels).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[k] += h;
            let mut m = logits.clone();
            m.data_mut()[k] -= h;
            let num = (noiretrieval_loss(&p, labels).unwrap().loss - noiretrieval_loss(&m, labels).unwrap().loss) / (2.0 * h);
            worst = worst.max(rel_err(ce.grad.data()[k], num));
        }
        worst
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = RngStream::new(6);
        let logits = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.uniform_range(-3.0, 3.0)).collect()).unwrap();
        assert!(fd_logits_check(&logits, &[4, 0, 2]) < 1e-7);
    }

    fn fd_cos_check(kind: LossKind, seed: u64) -> f64 {
        let cos = random_cosines(4, 6, seed);
        let labels = [1, 5, 0, 3];
        let desc = [0.0, 0.35, 0.8, 1.0];
        let c = LossConfig { s: 8.0, ..cfg() };
        let out = margin_loss(kind, &cos, &labels, &desc, &c).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..cos.len() {
            let mut p = cos.clone();
            p.data_mut()[k] += h;
            let mut m = cos.clone();
            m.data_mut()[k] -= h;
            let num = (margin_loss(kind, &p, &labels, &desc, &c).unwrap().loss
                - margin_loss(kind, &m, &labels, &desc, &c).unwrap().loss)
                / (2.0 * h);
            worst = worst.max((out.grad_cos.data()[k] - num).abs() / (num.abs() + 1e-3));
        }
        worst
    }

    #[test]
    fn margin_heads_gradients() {
        assert!(fd_cos_check(LossKind::NormSoftmax, 7) < 1e-6);
        assert!(fd_cos_check(LossKind::NoiRetrieval, 8) < 1e-6);
        assert!(fd_cos_check(LossKind::AdaFace, 9) < 1e-6);
    }

    #[test]
    fn normalized_softmax_is_parameter_collapse() {
        let cos = random_cosines(3, 4, 10);
        let labels = [0, 1, 3];
        let a = normalized_softmax_loss(&cos, &labels, 30.0).unwrap();
        let c = LossConfig { m: 0.0, ..cfg() };
        let b = margin_loss(LossKind::NoiRetrieval, &cos, &labels, &[0.0; 3], &c).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-9);
        let tie = Tensor::from_vec(&[1, 2], vec![0.3, 0.3]).unwrap();
        assert!((normalized_softmax_loss(&tie, &[0], 30.0).unwrap().loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn adaface_midpoint_and_endpoint() {
        let cos = Tensor::from_vec(&[1, 2], vec![0.6, 0.1]).unwrap();
        let l = adaface_logits(&cos, &[0], &[0.5], &cfg()).unwrap();
        assert!((l.data()[0] - 30.0 * (0.6 - 0.15)).abs() < 1e-9);
        let l = adaface_logits(&cos, &[0], &[1.0], &cfg()).unwrap();
        let theta = 0.6f64.acos();
        assert!((l.data()[0] - 30.0 * ((theta - 0.15).cos() - 2.0 * 0.15)).abs() < 1e-9);
    }

    #[test]
    fn gst_trivial_cases() {
        let c = cfg();
        assert_eq!(gst_noiretrieval(1.0, 0.4, 0.3, &c).value, 0.0);
        let g = gst_noiretrieval(0.2, 0.0, 0.7, &c);
        assert!((g.value - (0.2 - 1.0) * 0.7f64.cos() * 0.15f64.cos() * 30.0).abs() < 1e-12);
        assert!(!g.clamped);
        let g = gst_noiretrieval(0.5, 1.0, 0.0, &c);
        assert!(g.clamped && g.value.is_finite());
    }

    #[test]
    fn gst_matches_assembled_pipeline() {
        // numeric ∂(−log P_y)/∂cos θ_y through logits → softmax → NLL
        let c = cfg();
        for ti in 0..9 {
            let theta = 0.2 + 0.3 * ti as f64;
            for desc in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let other = (std::f64::consts::PI - theta).cos();
                let loss = |ct: f64| {
                    let cos = Tensor::from_vec(&[1, 2], vec![ct, other]).unwrap();
                    let logits = noiretrieval_logits(&cos, &[0], &[desc], &c).unwrap();
                    noiretrieval_loss(&logits, &[0]).unwrap()
                };
                let ct = theta.cos();
                let p = loss(ct).probs.data()[0];
                let h = 1e-7;
                let num = (loss(ct + h).loss - loss(ct - h).loss) / (2.0 * h);
                let g = gst_noiretrieval(p, ct, desc, &c).value;
                // FD noise floor of the loss is ~1e-16/h
                assert!((g - num).abs() < 1e-5 * num.abs() + 1e-8, "θ={theta} q={desc}: {g} vs {num}");
            }
        }
    }

    #[test]
    fn gst_magnitude_non_increasing_in_quality() {
        let c = cfg();
        for p in [0.0, 0.3, 0.9] {
            for ti in 1..30 {
                let ct = (0.1 * ti as f64).cos();
                let mut prev = f64::INFINITY;
                for k in 0..=10 {
                    let g = gst_noiretrieval(p, ct, k as f64 / 10.0, &c).value.abs();
                    assert!(g <= prev + 1e-15);
                    prev = g;
                }
            }
        }
    }

    #[test]
    fn info_nce_uniform_similarity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = info_nce(&a, &a, 1.0).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        let a = unit_rows(5, 3, 1);
        let same = Tensor::from_vec(&[5, 3], a.data()[..3].repeat(5)).unwrap();
        assert!((info_nce(&same, &same, 1.0).unwrap().loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_orthogonal_pairs() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = info_nce(&a, &a, 1.0).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((out.loss - expect).abs() < 1e-15);
        assert!((out.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn info_nce_needs_two_pairs() {
        let a = unit_rows(1, 4, 2);
        assert!(info_nce(&a, &a, 1.0).is_err());
    }

    #[test]
    fn info_nce_gradients() {
        for tau in [1.0, 0.3] {
            let a = unit_rows(4, 5, 3);
            let p = unit_rows(4, 5, 4);
            let out = info_nce(&a, &p, tau).unwrap();
            let h = 1e-6;
            for (which, grad) in [(0, &out.grad_anchors), (1, &out.grad_positives)] {
                for k in 0..a.len() {
                    let perturb = |delta: f64| {
                        let (mut x, mut y) = (a.clone(), p.clone());
                        if which == 0 {
                            x.data_mut()[k] += delta;
                        } else {
                            y.data_mut()[k] += delta;
                        }
                        info_nce(&x, &y, tau).unwrap().loss
                    };
                    let num = (perturb(h) - perturb(-h)) / (2.0 * h);
                    assert!(rel_err(grad.data()[k], num) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn info_nce_batch_permutation_invariant() {
        let a = unit_rows(6, 4, 5);
        let p = unit_rows(6, 4, 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let pick = |t: &Tensor| {
            Tensor::from_vec(&[6, 4], perm.iter().flat_map(|&i| t.data()[i * 4..(i + 1) * 4].to_vec()).collect()).unwrap()
        };
        let base = info_nce(&a, &p, 1.0).unwrap().loss;
        let permuted = info_nce(&pick(&a), &pick(&p), 1.0).unwrap().loss;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn classifier_columns_unit_and_cosines() {
        let head = ClassifierHead::init(6, 4, &mut RngStream::new(11)).unwrap();
        let w = head.normalized();
        for j in 0..4 {
            let col: Vec<f64> = (0..6).map(|r| w.data()[r * 4 + j]).collect();
            assert!((l2_norm(&col) - 1.0).abs() < 1e-12);
        }
        let f = unit_rows(3, 6, 12);
        let cos = head.cosines(&f).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let direct: f64 = (0..6).map(|r| f.data()[i * 6 + r] * w.data()[r * 4 + j]).sum();
                assert!((cos.data()[i * 4 + j] - direct).abs() < 1e-14);
            }
        }
        assert!(ClassifierHead::init(6, 1, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn classifier_backward_matches_finite_differences() {
        let mut rng = RngStream::new(13);
        let mut head = ClassifierHead::init(5, 3, &mut rng).unwrap();
        // off the unit sphere so the normalisation Jacobian matters
        head.weight.map_inplace(|v| 1.7 * v + 0.05);
        let f = unit_rows(4, 5, 14);
        let r = Tensor::from_vec(&[4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let (gw, gf) = head.backward(&r, &f).unwrap();
        let loss = |h: &ClassifierHead, f: &Tensor| h.cosines(f).unwrap().dot(&r);
        let eps = 1e-6;
        for k in 0..head.weight.len() {
            let (mut p, mut m) = (head.clone(), head.clone());
            p.weight.data_mut()[k] += eps;
            m.weight.data_mut()[k] -= eps;
            let num = (loss(&p, &f) - loss(&m, &f)) / (2.0 * eps);
            assert!(rel_err(gw.data()[k], num) < 1e-7);
        }
        for k in 0..f.len() {
            let (mut p, mut m) = (f.clone(), f.clone());
            p.data_mut()[k] += eps;
            m.data_mut()[k] -= eps;
            let num = (loss(&head, &p) - loss(&head, &m)) / (2.0 * eps);
            assert!(rel_err(gf.data()[k], num) < 1e-7);
        }
    }
}
