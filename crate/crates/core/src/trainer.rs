//! Paired clean/corrupted training loop.
//!
//! Each step draws `batch` clean images, corrupts a copy of each, runs both
//! through the encoder (the corrupted branch through the compensation block
//! as well) and minimises
//! `L_noi + α·InfoNCE(local_low, local_high) + β·InfoNCE(f_new_low, global_high)`
//! with SGD, momentum, weight decay, global gradient-norm clipping and a
//! cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::corruption::{make_pair, CorruptionSpec};
use crate::encoder::{self, EncoderOutput, HeadOutput};
use crate::error::{Error, Result};
use crate::losses::{info_nce, margin_loss, quality_descriptor};
use crate::model::Model;
use crate::numerics::{global_avg_pool, l2_normalize, l2_normalize_backward, Image, RngStream, Tensor};
use crate::qcb::{qcb_backward, qcb_forward, QcbOutput};
use crate::synthset::Manifest;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Global L2 bound on the raw gradient before momentum. The first steps from
/// a random init otherwise carry gradient norms above 100, mostly in the
/// projection bias, and one such step collapses all embeddings together.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x_high: Image,
    pub x_low: Image,
    /// classifier column, not the dataset class id
    pub class_index: usize,
    pub entry_id: u32,
    pub specs: Vec<CorruptionSpec>,
}

/// Clean training views held in memory, grouped by classifier column.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub classes: Vec<u32>,
    by_class: Vec<Vec<(u32, Image)>>,
}

impl TrainingSet {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let classes = manifest.query_classes();
        let mut by_class = vec![Vec::new(); classes.len()];
        for (entry, idx) in manifest.training_entries() {
            by_class[idx].push((entry.id, manifest.load_image(entry)?));
        }
        Self::from_groups(classes, by_class)
    }

    pub fn from_groups(classes: Vec<u32>, by_class: Vec<Vec<(u32, Image)>>) -> Result<Self> {
        let populated = by_class.iter().filter(|g| !g.is_empty()).count();
        if populated < 2 || populated != classes.len() || by_class.len() != classes.len() {
            return Err(Error::InvalidArgument(format!(
                "training needs at least 2 classes, each with images; got {populated} populated of {}",
                classes.len()
            )));
        }
        Ok(TrainingSet { classes, by_class })
    }

    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples a class uniformly, then an instance of it uniformly, and pairs it
/// with a freshly corrupted copy.
pub fn build_batch(set: &TrainingSet, batch_size: usize, rng: &mut RngStream) -> Result<Vec<TrainingPair>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be ≥ 2, got {batch_size}")));
    }
    (0..batch_size)
        .map(|_| {
            let class_index = rng.below(set.by_class.len() as u64) as usize;
            let group = &set.by_class[class_index];
            let (entry_id, image) = &group[rng.below(group.len() as u64) as usize];
            let (x_high, x_low, specs) = make_pair(image, rng)?;
            Ok(TrainingPair {
                x_high,
                x_low,
                class_index,
                entry_id: *entry_id,
                specs,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub step: usize,
    pub velocity: BTreeMap<&'static str, Tensor>,
}

impl OptState {
    pub fn new(config: &TrainConfig, total_steps: usize) -> Self {
        OptState {
            lr0: config.lr0,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            total_steps,
            step: 0,
            velocity: BTreeMap::new(),
        }
    }

    /// `lr0·(1 + cos(π·t/T))/2`
    pub fn lr_at(&self, t: usize) -> f64 {
        let frac = t as f64 / self.total_steps.max(1) as f64;
        self.lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossReport {
    pub l_noi: f64,
    pub l_info1: f64,
    pub l_info2: f64,
    pub total: f64,
    pub desc_clean_mean: f64,
    pub desc_noisy_mean: f64,
    pub lr: f64,
}

struct Branch {
    enc: EncoderOutput,
    pooled_local: Vec<f64>,
    f_new: Vec<f64>,
    qcb: Option<QcbOutput>,
    head: HeadOutput,
}

fn run_branch(image: &Image, model: &Model, compensate: bool) -> Result<Branch> {
    let enc = encoder::forward(image, &model.encoder)?;
    let pooled_local = global_avg_pool(&enc.f_local)?;
    let (f_new, qcb) = match (&model.qcb, compensate) {
        (Some(q), true) => {
            let out = qcb_forward(&enc.f_global, q)?;
            (out.f_new.clone(), Some(out))
        }
        _ => (global_avg_pool(&enc.f_global)?, None),
    };
    let head = encoder::head_from_pooled(&pooled_local, &f_new, &model.encoder)?;
    Ok(Branch {
        enc,
        pooled_local,
        f_new,
        qcb,
        head,
    })
}

fn unit_rows(rows: &[&[f64]]) -> Result<Tensor> {
    let d = rows[0].len();
    Tensor::from_vec(&[rows.len(), d], rows.iter().flat_map(|r| l2_normalize(r)).collect())
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = t.shape()[1];
    &t.data()[i * d..(i + 1) * d]
}

fn scaled(v: Vec<f64>, k: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * k).collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn accumulate(into: &mut Model, from: &[(&'static str, &Tensor)]) -> Result<()> {
    let lookup: BTreeMap<_, _> = from.iter().copied().collect();
    for (name, t) in into.named_mut() {
        if let Some(g) = lookup.get(name) {
            t.add_scaled(g, 1.0)?;
        }
    }
    Ok(())
}

/// Total loss and its gradient with respect to every model parameter.
pub fn loss_and_gradients(batch: &[TrainingPair], model: &Model) -> Result<(LossReport, Model)> {
    loss_and_gradients_with_quality(batch, model, None)
}

/// As [`loss_and_gradients`], optionally replacing the batch quality
/// descriptor by fixed values (clean rows first). Finite-difference checks
/// need this: the descriptor is gradient-stopped, so perturbing a parameter
/// must not move it.
pub fn loss_and_gradients_with_quality(
    batch: &[TrainingPair],
    model: &Model,
    fixed_desc: Option<&[f64]>,
) -> Result<(LossReport, Model)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("batch of {n} pairs; need at least 2")));
    }
    let cfg = model.config.loss_config();
    let mut high = Vec::with_capacity(n);
    let mut low = Vec::with_capacity(n);
    for pair in batch {
        high.push(run_branch(&pair.x_high, model, false)?);
        low.push(run_branch(&pair.x_low, model, true)?);
    }
    let branches: Vec<&Branch> = high.iter().chain(&low).collect();

    // margin head over both branches: rows 0..n clean, n..2n corrupted
    let features = unit_rows(&branches.iter().map(|b| b.head.z.as_slice()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = batch.iter().chain(batch).map(|p| p.class_index).collect();
    let norms: Vec<f64> = branches.iter().map(|b| b.head.raw_norm).collect();
    let mut quality = quality_descriptor(&norms, cfg.h)?;
    if let Some(d) = fixed_desc {
        if d.len() != 2 * n {
            return Err(Error::Shape(format!("{} fixed descriptors for {} images", d.len(), 2 * n)));
        }
        quality.desc = d.to_vec();
    }
    let cosines = model.head.cosines(&features)?;
    let margin = margin_loss(model.config.loss, &cosines, &labels, &quality.desc, &cfg)?;
    let (grad_head, grad_features) = model.head.backward(&margin.grad_cos, &features)?;

    let local_low: Vec<&[f64]> = low.iter().map(|b| b.pooled_local.as_slice()).collect();
    let local_high: Vec<&[f64]> = high.iter().map(|b| b.pooled_local.as_slice()).collect();
    let info1 = info_nce(&unit_rows(&local_low)?, &unit_rows(&local_high)?, cfg.tau)?;
    let new_low: Vec<&[f64]> = low.iter().map(|b| b.f_new.as_slice()).collect();
    let global_high: Vec<&[f64]> = high.iter().map(|b| b.f_new.as_slice()).collect();
    let info2 = info_nce(&unit_rows(&new_low)?, &unit_rows(&global_high)?, cfg.tau)?;

    let total = margin.loss + cfg.alpha * info1.loss + cfg.beta * info2.loss;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = LossReport {
        l_noi: margin.loss,
        l_info1: info1.loss,
        l_info2: info2.loss,
        total,
        desc_clean_mean: mean(&quality.desc[..n]),
        desc_noisy_mean: mean(&quality.desc[n..]),
        lr: 0.0,
    };

    let mut grads = model.zeros_like();
    grads.head.weight = grad_head;
    for (k, b) in branches.iter().enumerate() {
        let (i, is_low) = (k % n, k >= n);
        let grad_z = l2_normalize_backward(&b.head.z, row(&grad_features, k));
        let hg = encoder::head_backward_z(&grad_z, &b.head, &model.encoder);
        grads.encoder.proj_weight.add_scaled(&hg.proj_weight, 1.0)?;
        grads.encoder.proj_bias.add_scaled(&hg.proj_bias, 1.0)?;

        let (info1_grad, info2_grad) = if is_low {
            (row(&info1.grad_anchors, i), row(&info2.grad_anchors, i))
        } else {
            (row(&info1.grad_positives, i), row(&info2.grad_positives, i))
        };
        let mut grad_local = hg.pooled_local;
        add_into(&mut grad_local, &scaled(l2_normalize_backward(&b.pooled_local, info1_grad), cfg.alpha));
        let mut grad_new = hg.f_new;
        add_into(&mut grad_new, &scaled(l2_normalize_backward(&b.f_new, info2_grad), cfg.beta));

        let grad_global = match (&b.qcb, &model.qcb) {
            (Some(cache), Some(params)) => {
                let (qg, g) = qcb_backward(&grad_new, &cache.cache, params)?;
                accumulate(&mut grads, &qg.named())?;
                g
            }
            _ => encoder::pooled_grad_to_map(&grad_new, &b.enc.f_global),
        };
        let grad_local_map = encoder::pooled_grad_to_map(&grad_local, &b.enc.f_local);
        let eg = encoder::backward(&grad_local_map, &grad_global, &b.enc, &model.encoder)?;
        accumulate(&mut grads, &eg.named())?;
    }
    Ok((report, grads))
}

fn describe_batch(batch: &[TrainingPair], batch_id: usize, report: &LossReport) -> String {
    let mut out = format!(
        "batch {batch_id}: non-finite loss (l_noi={}, l_info1={}, l_info2={}); pairs:",
        report.l_noi, report.l_info1, report.l_info2
    );
    for p in batch {
        let specs: Vec<String> = p.specs.iter().map(|s| format!("{}@{}#{}", s.kind, s.severity, s.seed)).collect();
        let _ = write!(out, " [id {} class {} {}]", p.entry_id, p.class_index, specs.join("+"));
    }
    out
}

/// One optimisation step. The model is left untouched if the loss is not
/// finite.
pub fn train_step(batch: &[TrainingPair], model: &mut Model, opt: &mut OptState, batch_id: usize) -> Result<LossReport> {
    let (mut report, grads) = loss_and_gradients(batch, model)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(describe_batch(batch, batch_id, &report)));
    }
    let lr = opt.lr_at(opt.step);
    report.lr = lr;
    let grad_map: BTreeMap<_, _> = grads.named().into_iter().collect();
    let norm = grad_map.values().map(|g| g.dot(g)).sum::<f64>().sqrt();
    let clip = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };
    for (name, p) in model.named_mut() {
        let g = grad_map[name];
        let v = opt.velocity.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *vi = opt.momentum * *vi + clip * gi + opt.weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    model.head.renormalize();
    opt.step += 1;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_noi: f64,
    pub l_info1: f64,
    pub l_info2: f64,
    pub total: f64,
    pub desc_clean_mean: f64,
    pub desc_noisy_mean: f64,
    /// learning rate of the epoch's last step
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainRun {
    /// Writes the checkpoint and metrics CSV into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(CHECKPOINT_FILE))?;
        let path = dir.join(METRICS_FILE);
        std::fs::write(&path, metrics_csv(&self.metrics)).map_err(|e| Error::io(&path, e))
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,l_noi,l_info1,l_info2,total,desc_clean_mean,desc_noisy_mean,lr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.l_noi, r.l_info1, r.l_info2, r.total, r.desc_clean_mean, r.desc_noisy_mean, r.lr
        );
    }
    out
}

pub fn steps_per_epoch(set: &TrainingSet, batch: usize) -> usize {
    set.len().div_ceil(batch).max(1)
}

/// Trains from scratch on the manifest's easy and hard database views.
pub fn train(config: &TrainConfig, manifest: &Manifest) -> Result<TrainRun> {
    let set = TrainingSet::load(manifest)?;
    train_on(config, &set)
}

pub fn train_on(config: &TrainConfig, set: &TrainingSet) -> Result<TrainRun> {
    config.validate()?;
    if set.classes.len() != config.classes {
        return Err(Error::InvalidArgument(format!(
            "config expects {} classes but the dataset has {}",
            config.classes,
            set.classes.len()
        )));
    }
    let mut model = Model::init(config, set.classes.clone())?;
    let per_epoch = steps_per_epoch(set, config.batch);
    let mut opt = OptState::new(config, per_epoch * config.epochs);
    let batches = RngStream::derive(config.seed, "batches");
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut acc = EpochMetrics {
            epoch,
            l_noi: 0.0,
            l_info1: 0.0,
            l_info2: 0.0,
            total: 0.0,
            desc_clean_mean: 0.0,
            desc_noisy_mean: 0.0,
            lr: 0.0,
        };
        for _ in 0..per_epoch {
            let step = opt.step;
            let batch = build_batch(set, config.batch, &mut batches.fork("batch", step as u64))?;
            let r = train_step(&batch, &mut model, &mut opt, step)?;
            acc.l_noi += r.l_noi;
            acc.l_info1 += r.l_info1;
            acc.l_info2 += r.l_info2;
            acc.total += r.total;
            acc.desc_clean_mean += r.desc_clean_mean;
            acc.desc_noisy_mean += r.desc_noisy_mean;
            acc.lr = r.lr;
        }
        let k = per_epoch as f64;
        for v in [
            &mut acc.l_noi,
            &mut acc.l_info1,
            &mut acc.l_info2,
            &mut acc.total,
            &mut acc.desc_clean_mean,
            &mut acc.desc_noisy_mean,
        ] {
            *v /= k;
        }
        log::info!(
            "epoch {epoch}/{}: total {:.4} (noi {:.4}, info1 {:.4}, info2 {:.4}), desc clean {:.3} noisy {:.3}",
            config.epochs,
            acc.total,
            acc.l_noi,
            acc.l_info1,
            acc.l_info2,
            acc.desc_clean_mean,
            acc.desc_noisy_mean
        );
        metrics.push(acc);
    }
    Ok(TrainRun { model, metrics })
}
