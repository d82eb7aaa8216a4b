//! Procedural "landmark" dataset with query/database splits and
//! easy/hard/junk ground truth.
//!
//! Each class is a coloured, textured shape on a toned background. Views of a
//! class differ by a random similarity transform and hue shift; strong views
//! also carry an occluding band, junk views a much larger one.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Image, RngStream};

pub const IMAGE_SIZE: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Bar,
    Cross,
    Ring,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disc,
        ShapeKind::Bar,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Triangle,
    ];

    /// Membership test in shape-local coordinates, shape radius 1.
    fn contains(self, x: f64, y: f64) -> bool {
        let r = (x * x + y * y).sqrt();
        match self {
            ShapeKind::Disc => r <= 1.0,
            ShapeKind::Bar => x.abs() <= 1.0 && y.abs() <= 0.35,
            ShapeKind::Cross => {
                (x.abs() <= 1.0 && y.abs() <= 0.3) || (y.abs() <= 1.0 && x.abs() <= 0.3)
            }
            ShapeKind::Ring => (0.55..=1.0).contains(&r),
            ShapeKind::Triangle => {
                // equilateral, circumradius 1, apex up (y grows downward)
                let base_half_width = 3f64.sqrt() / 2.0;
                y <= 0.5 && x.abs() <= (y + 1.0) * base_half_width / 1.5
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub class_id: u32,
    pub shape_kind: ShapeKind,
    pub base_hue: f64,
    pub texture_freq: f64,
    pub background_tone: f64,
}

impl ClassParams {
    pub fn derive(dataset_seed: u64, class_id: u32) -> Self {
        let mut rng = RngStream::derive(dataset_seed, "class").fork("class", u64::from(class_id));
        ClassParams {
            class_id,
            shape_kind: ShapeKind::ALL[rng.below(5) as usize],
            base_hue: rng.uniform(),
            texture_freq: rng.uniform_range(1.0, 4.0),
            background_tone: rng.uniform_range(0.1, 0.9),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Jitter {
    Mild,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ViewJitter {
    shift: f64,
    rotation_deg: f64,
    scale: (f64, f64),
    hue: f64,
    occlusion: Option<(f64, f64)>,
}

impl Jitter {
    fn ranges(self) -> ViewJitter {
        match self {
            Jitter::Mild => ViewJitter {
                shift: 0.10,
                rotation_deg: 10.0,
                scale: (0.9, 1.1),
                hue: 0.02,
                occlusion: None,
            },
            Jitter::Strong => ViewJitter {
                shift: 0.30,
                rotation_deg: 60.0,
                scale: (0.5, 1.5),
                hue: 0.08,
                occlusion: Some((0.10, 0.25)),
            },
        }
    }
}

/// HSV → RGB, all components in [0, 1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const SHAPE_RADIUS: f64 = 0.55;

fn render(params: &ClassParams, view_seed: u64, ranges: ViewJitter) -> Image {
    let mut rng = RngStream::derive(view_seed, "view");
    let tx = rng.uniform_range(-ranges.shift, ranges.shift) * 2.0;
    let ty = rng.uniform_range(-ranges.shift, ranges.shift) * 2.0;
    let rot = rng
        .uniform_range(-ranges.rotation_deg, ranges.rotation_deg)
        .to_radians();
    let scale = rng.uniform_range(ranges.scale.0, ranges.scale.1);
    let hue = params.base_hue + rng.uniform_range(-ranges.hue, ranges.hue);
    let color = hsv_to_rgb(hue, 0.75, 0.95);
    let bg_tint = hsv_to_rgb(params.base_hue + 0.5, 0.25, 1.0);
    let (sin_r, cos_r) = rot.sin_cos();
    let radius = SHAPE_RADIUS * scale;
    let n = IMAGE_SIZE;
    let mut img = Image::constant(n, n, 0.0);
    for py in 0..n {
        for px in 0..n {
            let mut acc = [0.0; 3];
            // 2×2 supersampling
            for sy in 0..2 {
                for sx in 0..2 {
                    let u = ((px as f64 + 0.25 + 0.5 * sx as f64) / n as f64) * 2.0 - 1.0;
                    let v = ((py as f64 + 0.25 + 0.5 * sy as f64) / n as f64) * 2.0 - 1.0;
                    let (du, dv) = (u - tx, v - ty);
                    let lx = (cos_r * du + sin_r * dv) / radius;
                    let ly = (-sin_r * du + cos_r * dv) / radius;
                    let rgb = if params.shape_kind.contains(lx, ly) {
                        let stripe = 0.5
                            + 0.5 * (std::f64::consts::PI * params.texture_freq * (lx + 1.0)).sin();
                        let k = 0.55 + 0.45 * stripe;
                        [color[0] * k, color[1] * k, color[2] * k]
                    } else {
                        let tone = params.background_tone * (0.85 + 0.15 * v);
                        [tone * bg_tint[0], tone * bg_tint[1], tone * bg_tint[2]]
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c] / 4.0;
                    }
                }
            }
            for (c, a) in acc.into_iter().enumerate() {
                img.set(py, px, c, a.clamp(0.0, 1.0));
            }
        }
    }
    if let Some((lo, hi)) = ranges.occlusion {
        occlude(&mut img, rng.uniform_range(lo, hi), &mut rng);
    }
    img
}

/// Full-span horizontal or vertical band covering `fraction` of the area.
fn occlude(img: &mut Image, fraction: f64, rng: &mut RngStream) {
    let n = img.height();
    let thickness = ((fraction * n as f64).round() as usize).clamp(1, n);
    let start = rng.below((n - thickness + 1) as u64) as usize;
    let vertical = rng.coin();
    let gray = rng.uniform_range(0.2, 0.8);
    for a in start..start + thickness {
        for b in 0..n {
            let (y, x) = if vertical { (b, a) } else { (a, b) };
            for c in 0..3 {
                img.set(y, x, c, gray);
            }
        }
    }
}

/// One 64×64 view of a class.
pub fn render_instance(params: &ClassParams, view_seed: u64, jitter: Jitter) -> Image {
    render(params, view_seed, jitter.ranges())
}

/// Strong-jitter view with an occluder covering 40–60% of the image.
pub fn render_junk(params: &ClassParams, view_seed: u64) -> Image {
    let mut ranges = Jitter::Strong.ranges();
    ranges.occlusion = Some((0.40, 0.60));
    render(params, view_seed, ranges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Db,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub role: Role,
    pub class_id: u32,
    pub file: String,
    pub jitter: Jitter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub easy: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub junk: Option<Vec<u32>>,
}

/// Per-query relevance tiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalGroundTruth {
    pub query_id: u32,
    pub easy_ids: BTreeSet<u32>,
    pub hard_ids: BTreeSet<u32>,
    pub junk_ids: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        let manifest = Manifest {
            root: dir.to_path_buf(),
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn entry(&self, id: u32) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.file)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<Image> {
        Image::read_ppm(&self.path_of(entry))
    }

    pub fn queries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role == Role::Query)
    }

    /// Everything a query is ranked against: database views and distractors.
    pub fn database(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role != Role::Query)
    }

    pub fn ground_truth(&self) -> Vec<RetrievalGroundTruth> {
        self.queries()
            .map(|q| RetrievalGroundTruth {
                query_id: q.id,
                easy_ids: q.easy.iter().flatten().copied().collect(),
                hard_ids: q.hard.iter().flatten().copied().collect(),
                junk_ids: q.junk.iter().flatten().copied().collect(),
            })
            .collect()
    }

    /// Database views usable for training: easy and hard positives of every
    /// query class (junk and distractors excluded), as `(entry, class index)`.
    pub fn training_entries(&self) -> Vec<(&ManifestEntry, usize)> {
        let classes = self.query_classes();
        let mut out = Vec::new();
        for gt in self.ground_truth() {
            let class = self.entry(gt.query_id).map(|q| q.class_id).unwrap_or(0);
            let idx = classes.iter().position(|&c| c == class).unwrap_or(0);
            for id in gt.easy_ids.iter().chain(&gt.hard_ids) {
                if let Some(e) = self.entry(*id) {
                    out.push((e, idx));
                }
            }
        }
        out.sort_by_key(|(e, _)| e.id);
        out
    }

    /// Sorted class ids that own a query.
    pub fn query_classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.queries().map(|q| q.class_id).collect();
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u32> = self.entries.iter().map(|e| e.id).collect();
        if ids.len() != self.entries.len() {
            return Err(Error::Format("duplicate ids in manifest".into()));
        }
        let db: BTreeSet<u32> = self.database().map(|e| e.id).collect();
        for gt in self.ground_truth() {
            let tiers = [&gt.easy_ids, &gt.hard_ids, &gt.junk_ids];
            for (i, a) in tiers.iter().enumerate() {
                if let Some(bad) = a.iter().find(|id| !db.contains(id)) {
                    return Err(Error::Format(format!(
                        "query {} lists id {bad} which is not a database entry",
                        gt.query_id
                    )));
                }
                for b in &tiers[i + 1..] {
                    if !a.is_disjoint(b) {
                        return Err(Error::Format(format!(
                            "query {} has overlapping relevance tiers",
                            gt.query_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-class split sizes `(easy, hard, junk)` for the database views.
pub fn split_sizes(per_class: usize) -> (usize, usize, usize) {
    let n_db = per_class - 1;
    let junk = ((0.1 * per_class as f64).round() as usize).max(1);
    let hard = ((0.3 * per_class as f64).round() as usize).max(1);
    (n_db - hard - junk, hard, junk)
}

/// Renders the dataset into `out_dir` and writes `manifest.jsonl`.
///
/// Per class: one mild query, then easy (mild), hard (strong) and junk
/// (heavily occluded) database views; followed by one distractor view for
/// each of `n_classes` unused class parameter draws.
pub fn generate_dataset(n_classes: usize, per_class: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
    }
    if per_class < 6 {
        return Err(Error::InvalidArgument(format!("need at least 6 images per class, got {per_class}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (n_easy, n_hard, n_junk) = split_sizes(per_class);
    let views = RngStream::derive(seed, "views");
    let mut entries = Vec::new();
    let mut next_id = 0u32;

    let mut emit = |entries: &mut Vec<ManifestEntry>, class: &ClassParams, role: Role, jitter: Jitter, junk: bool| -> Result<u32> {
        let id = next_id;
        next_id += 1;
        let view_seed = views.fork("view", u64::from(id)).next_u64();
        let img = if junk {
            render_junk(class, view_seed)
        } else {
            render_instance(class, view_seed, jitter)
        };
        let file = format!("{id:05}.ppm");
        img.write_ppm(&out_dir.join(&file))?;
        entries.push(ManifestEntry {
            id,
            role,
            class_id: class.class_id,
            file,
            jitter,
            easy: None,
            hard: None,
            junk: None,
        });
        Ok(id)
    };

    for class_id in 0..n_classes as u32 {
        let class = ClassParams::derive(seed, class_id);
        let q_index = entries.len();
        emit(&mut entries, &class, Role::Query, Jitter::Mild, false)?;
        let easy = (0..n_easy)
            .map(|_| emit(&mut entries, &class, Role::Db, Jitter::Mild, false))
            .collect::<Result<Vec<_>>>()?;
        let hard = (0..n_hard)
            .map(|_| emit(&mut entries, &class, Role::Db, Jitter::Strong, false))
            .collect::<Result<Vec<_>>>()?;
        let junk = (0..n_junk)
            .map(|_| emit(&mut entries, &class, Role::Db, Jitter::Strong, true))
            .collect::<Result<Vec<_>>>()?;
        let q = &mut entries[q_index];
        q.easy = Some(easy);
        q.hard = Some(hard);
        q.junk = Some(junk);
    }
    for k in 0..n_classes as u32 {
        let class = ClassParams::derive(seed, n_classes as u32 + k);
        emit(&mut entries, &class, Role::Distractor, Jitter::Mild, false)?;
    }

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.validate()?;
    let path = out_dir.join(MANIFEST_FILE);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.to_jsonl()?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
