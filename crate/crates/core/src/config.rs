//! Experiment configuration shared by training, evaluation and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{default_scales, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// dataset shape, used by data generation and checked against the manifest
    pub classes: usize,
    pub per_class: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub s: f64,
    pub m: f64,
    pub h: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d: usize,
    pub scales: Vec<f64>,
    pub qcb_enabled: bool,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let l = LossConfig::default();
        TrainConfig {
            seed: 0,
            classes: 32,
            per_class: 10,
            batch: 32,
            epochs: 30,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            s: l.s,
            m: l.m,
            h: l.h,
            tau: l.tau,
            alpha: l.alpha,
            beta: l.beta,
            d: DEFAULT_DIM,
            scales: default_scales(),
            qcb_enabled: true,
            loss: LossKind::NoiRetrieval,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            s: self.s,
            m: self.m,
            h: self.h,
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.classes < 2 {
            return bad(format!("classes must be ≥ 2, got {}", self.classes));
        }
        if self.batch < 2 {
            return bad(format!("batch must be ≥ 2, got {}", self.batch));
        }
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !(self.lr0 > 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return bad(format!(
                "optimizer settings lr0={}, momentum={}, weight_decay={} are out of range",
                self.lr0, self.momentum, self.weight_decay
            ));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return bad(format!("scales must be positive and non-empty, got {:?}", self.scales));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
