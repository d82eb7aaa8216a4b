//! Cosine ranking, average precision and the Easy/Medium/Hard protocols,
//! with optionally corrupted queries against a clean database.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corruption::{make_pair, CorruptionSpec};
use crate::error::{Error, Result};
use crate::losses::quality_descriptor;
use crate::model::Model;
use crate::numerics::{Image, RngStream, Tensor};
use crate::synthset::{Manifest, ManifestEntry, RetrievalGroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Easy,
    Medium,
    Hard,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Easy, Protocol::Medium, Protocol::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Easy => "easy",
            Protocol::Medium => "medium",
            Protocol::Hard => "hard",
        }
    }

    /// `(positives, ignored)` for one query.
    pub fn split(self, gt: &RetrievalGroundTruth) -> (BTreeSet<u32>, BTreeSet<u32>) {
        let union = |a: &BTreeSet<u32>, b: &BTreeSet<u32>| a.union(b).copied().collect::<BTreeSet<u32>>();
        match self {
            Protocol::Easy => (gt.easy_ids.clone(), union(&gt.hard_ids, &gt.junk_ids)),
            Protocol::Medium => (union(&gt.easy_ids, &gt.hard_ids), gt.junk_ids.clone()),
            Protocol::Hard => (gt.hard_ids.clone(), union(&gt.easy_ids, &gt.junk_ids)),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown protocol {s:?}; expected easy, medium or hard")))
    }
}

/// Row indices of `db` by descending dot product with `query`; ties go to
/// the lower index.
pub fn rank(query: &[f64], db: &Tensor) -> Result<Vec<usize>> {
    let (m, d) = match db.shape() {
        &[m, d] => (m, d),
        s => return Err(Error::Shape(format!("database must be M×d, got {s:?}"))),
    };
    if m == 0 {
        return Err(Error::InvalidArgument("cannot rank against an empty database".into()));
    }
    if query.len() != d {
        return Err(Error::Shape(format!("query has {} dims, database rows {d}", query.len())));
    }
    let scores: Vec<f64> = db
        .data()
        .chunks(d)
        .map(|r| r.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Mean precision at the ranks of the positives, after deleting junk ids.
pub fn average_precision(ranked: &[u32], positives: &BTreeSet<u32>, junk: &BTreeSet<u32>) -> Result<f64> {
    let wanted = positives.difference(junk).count();
    if wanted == 0 {
        return Err(Error::InvalidArgument("query has no positives outside the junk set".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let kept = ranked.iter().filter(|id| !junk.contains(id));
    for (k, id) in kept.enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / wanted as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryAp {
    pub query_id: u32,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub protocol: Protocol,
    pub noisy_queries: bool,
    pub per_query: Vec<QueryAp>,
    /// queries without positives under this protocol
    pub skipped: Vec<u32>,
    pub map: f64,
}

/// Unit descriptors for a list of manifest ids, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    pub ids: Vec<u32>,
    pub rows: Tensor,
}

impl Descriptors {
    pub fn from_rows(ids: Vec<u32>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.len() != ids.len() || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("{} ids for {} ragged or missing rows", ids.len(), rows.len())));
        }
        Ok(Descriptors {
            rows: Tensor::from_vec(&[ids.len(), d], rows.concat())?,
            ids,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.rows.shape()[1];
        &self.rows.data()[i * d..(i + 1) * d]
    }
}

fn sorted_entries<'a>(it: impl Iterator<Item = &'a ManifestEntry>) -> Vec<&'a ManifestEntry> {
    let mut v: Vec<_> = it.collect();
    v.sort_by_key(|e| e.id);
    v
}

/// Evaluation corruption for one query: a dedicated stream per query id,
/// independent of anything drawn during training.
pub fn corrupt_query(image: &Image, query_id: u32, seed: u64) -> Result<(Image, Vec<CorruptionSpec>)> {
    let mut rng = RngStream::derive(seed, "eval-corrupt").fork("query", u64::from(query_id));
    let (_, noisy, specs) = make_pair(image, &mut rng)?;
    Ok((noisy, specs))
}

/// Database descriptors (database views and distractors), clean, by id.
pub fn database_descriptors(
    manifest: &Manifest,
    mut describe: impl FnMut(&Image) -> Result<Vec<f64>>,
) -> Result<Descriptors> {
    let entries = sorted_entries(manifest.database());
    let rows = entries
        .iter()
        .map(|e| describe(&manifest.load_image(e)?))
        .collect::<Result<Vec<_>>>()?;
    Descriptors::from_rows(entries.iter().map(|e| e.id).collect(), rows)
}

/// Query descriptors, corrupted first when `noisy_seed` is given.
pub fn query_descriptors(
    manifest: &Manifest,
    noisy_seed: Option<u64>,
    mut describe: impl FnMut(&Image) -> Result<Vec<f64>>,
) -> Result<Descriptors> {
    let entries = sorted_entries(manifest.queries());
    let rows = entries
        .iter()
        .map(|e| {
            let clean = manifest.load_image(e)?;
            match noisy_seed {
                Some(seed) => describe(&corrupt_query(&clean, e.id, seed)?.0),
                None => describe(&clean),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Descriptors::from_rows(entries.iter().map(|e| e.id).collect(), rows)
}

pub fn evaluate_descriptors(
    db: &Descriptors,
    queries: &Descriptors,
    ground_truth: &[RetrievalGroundTruth],
    protocol: Protocol,
    noisy_queries: bool,
) -> Result<EvalRun> {
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for (qi, &qid) in queries.ids.iter().enumerate() {
        let gt = ground_truth
            .iter()
            .find(|g| g.query_id == qid)
            .ok_or_else(|| Error::Format(format!("no ground truth for query {qid}")))?;
        let (positives, ignore) = protocol.split(gt);
        if positives.is_empty() {
            log::warn!("query {qid} has no {protocol} positives; skipped");
            skipped.push(qid);
            continue;
        }
        let ranked: Vec<u32> = rank(queries.row(qi), &db.rows)?.into_iter().map(|i| db.ids[i]).collect();
        per_query.push(QueryAp {
            query_id: qid,
            ap: average_precision(&ranked, &positives, &ignore)?,
        });
    }
    if per_query.is_empty() {
        return Err(Error::InvalidArgument(format!("no query has {protocol} positives")));
    }
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(EvalRun {
        protocol,
        noisy_queries,
        per_query,
        skipped,
        map,
    })
}

/// Database and query descriptors for one model, reusable across protocols.
pub struct ModelDescriptors {
    pub db: Descriptors,
    pub clean: Descriptors,
    pub noisy: Option<Descriptors>,
}

impl ModelDescriptors {
    pub fn extract(model: &Model, manifest: &Manifest, noisy_seed: Option<u64>) -> Result<Self> {
        let describe = |img: &Image| model.multiscale_descriptor(img);
        Ok(ModelDescriptors {
            db: database_descriptors(manifest, describe)?,
            clean: query_descriptors(manifest, None, describe)?,
            noisy: noisy_seed
                .map(|s| query_descriptors(manifest, Some(s), describe))
                .transpose()?,
        })
    }

    pub fn evaluate(&self, manifest: &Manifest, protocol: Protocol, noisy: bool) -> Result<EvalRun> {
        let queries = if noisy {
            self.noisy
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("noisy query descriptors were not extracted".into()))?
        } else {
            &self.clean
        };
        evaluate_descriptors(&self.db, queries, &manifest.ground_truth(), protocol, noisy)
    }
}

pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    protocol: Protocol,
    noisy_queries: bool,
    corruption_seed: u64,
) -> Result<EvalRun> {
    let seed = noisy_queries.then_some(corruption_seed);
    let describe = |img: &Image| model.multiscale_descriptor(img);
    let db = database_descriptors(manifest, describe)?;
    let queries = query_descriptors(manifest, seed, describe)?;
    evaluate_descriptors(&db, &queries, &manifest.ground_truth(), protocol, noisy_queries)
}

pub fn report_csv(runs: &[EvalRun]) -> String {
    let mut out = String::from("protocol,noisy,n_queries,map\n");
    for r in runs {
        let _ = writeln!(out, "{},{},{},{}", r.protocol, r.noisy_queries, r.per_query.len(), r.map);
    }
    out
}

#[derive(Serialize)]
struct ApLine {
    protocol: Protocol,
    noisy: bool,
    query_id: u32,
    ap: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    skipped: bool,
}

pub fn per_query_jsonl(runs: &[EvalRun]) -> Result<String> {
    let mut out = String::new();
    for r in runs {
        let lines = r
            .per_query
            .iter()
            .map(|q| (q.query_id, q.ap, false))
            .chain(r.skipped.iter().map(|&id| (id, 0.0, true)));
        for (query_id, ap, skipped) in lines {
            let line = ApLine {
                protocol: r.protocol,
                noisy: r.noisy_queries,
                query_id,
                ap,
                skipped,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Mean batch quality descriptor of the clean and the corrupted queries,
/// standardised jointly over all `2Q` single-scale feature norms.
pub fn query_quality(model: &Model, manifest: &Manifest, corruption_seed: u64) -> Result<(f64, f64)> {
    let entries = sorted_entries(manifest.queries());
    let mut norms = Vec::with_capacity(2 * entries.len());
    let mut noisy_norms = Vec::with_capacity(entries.len());
    for e in &entries {
        let clean = manifest.load_image(e)?;
        let (noisy, _) = corrupt_query(&clean, e.id, corruption_seed)?;
        norms.push(model.describe(&clean)?.raw_norm);
        noisy_norms.push(model.describe(&noisy)?.raw_norm);
    }
    let q = entries.len();
    norms.extend(noisy_norms);
    let desc = quality_descriptor(&norms, model.config.h)?.desc;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&desc[..q]), mean(&desc[q..])))
}
