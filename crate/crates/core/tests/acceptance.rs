//! Acceptance gate. Runs every criterion at its pinned tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any of them fails.
//!
//! The ablation, quality and loss-curve checks share one set of training
//! runs on the default 32-class dataset, so the whole gate takes roughly as
//! long as seven default trainings.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use noiret::config::TrainConfig;
use noiret::gradcheck::{self, BLOCK_TOLERANCE, COMPONENTS, HEAD_TOLERANCE};
use noiret::gstmap::{gst_map, write_gst_map};
use noiret::losses::{gst_noiretrieval, noiretrieval_logits, quality_descriptor, softmax_probs, LossConfig, LossKind};
use noiret::model::Model;
use noiret::numerics::{RngStream, Tensor};
use noiret::retrieval::{
    average_precision, corrupt_query, evaluate_descriptors, query_quality, report_csv, Descriptors, EvalRun,
    ModelDescriptors, Protocol,
};
use noiret::synthset::{generate_dataset, Manifest, RetrievalGroundTruth};
use noiret::trainer::{train, EpochMetrics, TrainRun, CHECKPOINT_FILE, METRICS_FILE};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const GST_REL_TOL: f64 = 1e-5;
/// Below this magnitude the GST is judged on absolute error, since `P − 1`
/// cannot be resolved in f64 once `1 − P` falls under ~1e-16.
const GST_FLOOR: f64 = 1e-9;
/// Slack for ties in the descriptor monotonicity check.
const DESC_ROUNDING: f64 = 1e-12;
const DESC_EXAMPLE: [f64; 3] = [0.2979, 0.5, 0.7021];
const AP_INSTANCES: usize = 1000;
const ABLATION_BUDGET: Duration = Duration::from_secs(15 * 60);
const MARGIN_OVER_SOFTMAX: f64 = 0.03;
const MAX_FULL_MODEL_DROP: f64 = 0.005;
const QUALITY_GAP: f64 = 0.02;
const EVAL_SEED: u64 = 0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    label: String,
    passed: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, label: impl Into<String>, passed: bool, detail: String) {
    let o = Outcome {
        label: label.into(),
        passed,
        detail,
    };
    println!("{:<44} {}  {}", o.label, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    outcomes.push(o);
}

fn criterion_1(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let report_ = gradcheck::run(0).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let names: Vec<&str> = report_.entries.iter().map(|e| e.component).collect();
    let mut ok = names == COMPONENTS && elapsed < GRADCHECK_BUDGET;
    let mut worst = Vec::new();
    for e in &report_.entries {
        let tol = match e.component {
            "conv" | "encoder" | "qcb" => BLOCK_TOLERANCE,
            _ => HEAD_TOLERANCE,
        };
        ok &= e.tolerance == tol && e.worst_rel_err < tol && e.checked > 0;
        worst.push(format!("{}={:.1e}", e.component, e.worst_rel_err));
    }
    ok &= BLOCK_TOLERANCE == 1e-4 && HEAD_TOLERANCE == 1e-6;
    report(
        out,
        "1 gradient exactness",
        ok,
        format!("{} in {:.1}s", worst.join(" "), elapsed.as_secs_f64()),
    );
}

/// −log P_target of the two-class problem, evaluated without cancellation
/// so tiny losses keep their relative precision.
fn two_class_nll(cos_target: f64, cos_other: f64, desc: f64, cfg: &LossConfig) -> f64 {
    let cos = Tensor::from_vec(&[1, 2], vec![cos_target, cos_other]).unwrap();
    let l = noiretrieval_logits(&cos, &[0], &[desc], cfg).unwrap();
    let d = l.data()[1] - l.data()[0];
    if d < 0.0 {
        d.exp().ln_1p()
    } else {
        d + (-d).exp().ln_1p()
    }
}

fn criterion_2(out: &mut Vec<Outcome>) {
    let cfg = LossConfig::default();
    // Near θ = π the acos inside the margin is steep enough that a 1e-4 step
    // leaves ~1e-5 truncation error in the stencil.
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let cells = gst_map(&cfg, 64, 21).unwrap();
    for cell in &cells {
        let ct = cell.theta.cos();
        let other = (std::f64::consts::PI - cell.theta).cos();
        let f = |x: f64| two_class_nll(x, other, cell.desc, &cfg);
        let num = (-f(ct + 2.0 * h) + 8.0 * f(ct + h) - 8.0 * f(ct - h) + f(ct - 2.0 * h)) / (12.0 * h);
        let cos = Tensor::from_vec(&[1, 2], vec![ct, other]).unwrap();
        let logits = noiretrieval_logits(&cos, &[0], &[cell.desc], &cfg).unwrap();
        let p = softmax_probs(&logits).unwrap().data()[0];
        let g = gst_noiretrieval(p, ct, cell.desc, &cfg).value;
        worst = worst.max((g - num).abs() / num.abs().max(GST_FLOOR));
    }
    report(
        out,
        "2 GST vs assembled pipeline",
        worst < GST_REL_TOL,
        format!("{} cells, worst rel err {worst:.2e} (tol {GST_REL_TOL:.0e})", cells.len()),
    );
}

fn criterion_3(out: &mut Vec<Outcome>) {
    let h = LossConfig::default().h;
    let mut rng = RngStream::derive(3, "descriptor-law");
    let (mut range, mut monotone, mut scale, mut guard) = (true, true, true, true);
    for _ in 0..500 {
        let n = 2 + rng.below(15) as usize;
        let norms: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 10.0)).collect();
        let q = quality_descriptor(&norms, h).unwrap();
        range &= q.desc.iter().all(|d| (0.0..=1.0).contains(d));

        let i = rng.below(n as u64) as usize;
        let mut bumped = norms.clone();
        bumped[i] += rng.uniform_range(0.0, 3.0);
        // With two norms the standardised score is ±1 whatever the gap, so a
        // bump leaves it unchanged up to rounding.
        monotone &= quality_descriptor(&bumped, h).unwrap().desc[i] >= q.desc[i] - DESC_ROUNDING;

        let k = rng.uniform_range(0.01, 100.0);
        let scaled: Vec<f64> = norms.iter().map(|v| v * k).collect();
        let qs = quality_descriptor(&scaled, h).unwrap();
        scale &= qs.desc.iter().zip(&q.desc).all(|(a, b)| (a - b).abs() < 1e-12);

        let c = rng.uniform_range(0.1, 10.0);
        let flat = quality_descriptor(&vec![c; n], h).unwrap();
        guard &= flat.desc.iter().all(|&d| d == 0.5);
    }
    let example = quality_descriptor(&[1.0, 2.0, 3.0], 0.33).unwrap().desc;
    let worked = example.iter().zip(DESC_EXAMPLE).all(|(a, b)| (a - b).abs() < 5e-5);
    report(
        out,
        "3 descriptor law",
        range && monotone && scale && guard && worked,
        format!(
            "range={range} monotone={monotone} scale-invariant={scale} σ=0-guard={guard} example={:.4?}",
            example
        ),
    );
}

fn criterion_4(out: &mut Vec<Outcome>, dir: &Path) {
    let path = dir.join("gst_map.csv");
    write_gst_map(&LossConfig::default(), 64, 21, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some("theta,desc,P_target,g,abs_g");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let mut monotone = true;
    let mut saturated = 0;
    let mut zero_where_saturated = true;
    for w in rows.windows(2) {
        if w[0][0] == w[1][0] {
            monotone &= w[1][4] <= w[0][4];
        }
    }
    for r in &rows {
        if r[2] == 1.0 {
            saturated += 1;
            zero_where_saturated &= r[3] == 0.0 && r[4] == 0.0;
        }
    }
    report(
        out,
        "4 GST map attenuation",
        header_ok && rows.len() == 64 * 21 && monotone && zero_where_saturated,
        format!(
            "{} cells, |g| non-increasing per θ={monotone}, {saturated} cells with P=1 all g=0={zero_where_saturated}",
            rows.len()
        ),
    );
}

/// Precision at every cutoff, counted from scratch, summed over relevant
/// cutoffs in rank order.
fn brute_force_ap(ranked: &[u32], pos: &BTreeSet<u32>, junk: &BTreeSet<u32>) -> f64 {
    let kept: Vec<u32> = ranked.iter().copied().filter(|i| !junk.contains(i)).collect();
    let relevant = pos.iter().filter(|p| !junk.contains(p)).count();
    let mut sum = 0.0;
    for k in 1..=kept.len() {
        if pos.contains(&kept[k - 1]) {
            let tp = kept[..k].iter().filter(|i| pos.contains(i)).count();
            sum += tp as f64 / k as f64;
        }
    }
    sum / relevant as f64
}

fn gt(query_id: u32, easy: &[u32], hard: &[u32], junk: &[u32]) -> RetrievalGroundTruth {
    let set = |v: &[u32]| v.iter().copied().collect();
    RetrievalGroundTruth {
        query_id,
        easy_ids: set(easy),
        hard_ids: set(hard),
        junk_ids: set(junk),
    }
}

fn criterion_5(out: &mut Vec<Outcome>) {
    let mut rng = RngStream::derive(5, "ap-instances");
    let mut mismatches = 0;
    for _ in 0..AP_INSTANCES {
        let m = 1 + rng.below(30) as u32;
        let mut ranked: Vec<u32> = (0..m).collect();
        rng.shuffle(&mut ranked);
        let mut pos = BTreeSet::new();
        let mut junk = BTreeSet::new();
        for id in 0..m {
            match rng.below(4) {
                0 => {
                    pos.insert(id);
                }
                1 => {
                    junk.insert(id);
                }
                _ => {}
            }
        }
        if pos.is_empty() {
            pos.insert(rng.below(u64::from(m)) as u32);
            junk.retain(|j| !pos.contains(j));
        }
        if average_precision(&ranked, &pos, &junk).unwrap() != brute_force_ap(&ranked, &pos, &junk) {
            mismatches += 1;
        }
    }

    // ranking is 1..6 for every query; APs counted by hand
    let rows = (1..=6)
        .map(|i| {
            let s = 1.0 - 0.1 * i as f64;
            vec![s, (1.0 - s * s).sqrt()]
        })
        .collect();
    let db = Descriptors::from_rows((1..=6).collect(), rows).unwrap();
    let queries = Descriptors::from_rows(vec![101, 102, 103], vec![vec![1.0, 0.0]; 3]).unwrap();
    let truth = vec![gt(101, &[2, 5], &[1], &[3]), gt(102, &[6], &[4], &[1]), gt(103, &[], &[3], &[])];
    let expected: [(Protocol, &[f64], &[u32]); 3] = [
        (Protocol::Easy, &[5.0 / 6.0, 1.0 / 4.0], &[103]),
        (Protocol::Medium, &[11.0 / 12.0, 11.0 / 30.0, 1.0 / 3.0], &[]),
        (Protocol::Hard, &[1.0, 1.0 / 3.0, 1.0 / 3.0], &[]),
    ];
    let mut fixtures = true;
    for (protocol, aps, skipped) in expected {
        let run = evaluate_descriptors(&db, &queries, &truth, protocol, false).unwrap();
        fixtures &= run.per_query.len() == aps.len()
            && run.per_query.iter().zip(aps).all(|(q, e)| (q.ap - e).abs() < 1e-12)
            && run.skipped == skipped;
    }
    report(
        out,
        "5 mAP correctness",
        mismatches == 0 && fixtures,
        format!("{AP_INSTANCES} random instances, {mismatches} mismatches; 3-query fixtures ok={fixtures}"),
    );
}

fn eval_bits(run: &EvalRun) -> Vec<u64> {
    let mut bits = vec![run.map.to_bits()];
    bits.extend(run.per_query.iter().map(|q| q.ap.to_bits()));
    bits
}

fn criterion_7(out: &mut Vec<Outcome>, manifest: &Manifest) {
    let classes = manifest.query_classes();
    let with = Model::init(&TrainConfig::default(), classes.clone()).unwrap();
    let without = Model::init(
        &TrainConfig {
            qcb_enabled: false,
            ..TrainConfig::default()
        },
        classes,
    )
    .unwrap();
    let a = ModelDescriptors::extract(&with, manifest, Some(EVAL_SEED)).unwrap();
    let b = ModelDescriptors::extract(&without, manifest, Some(EVAL_SEED)).unwrap();
    let mut same = a.db == b.db && a.clean == b.clean && a.noisy == b.noisy;
    let mut maps = Vec::new();
    for protocol in Protocol::ALL {
        for noisy in [false, true] {
            let ra = a.evaluate(manifest, protocol, noisy).unwrap();
            let rb = b.evaluate(manifest, protocol, noisy).unwrap();
            same &= eval_bits(&ra) == eval_bits(&rb);
            maps.push(format!("{:.4}", ra.map));
        }
    }
    report(
        out,
        "7 identity at init",
        with.qcb.is_some() && without.qcb.is_none() && same,
        format!("descriptors and all 6 evaluations bit-identical={same} (mAPs {})", maps.join(" ")),
    );
}

fn pipeline_once(root: &Path) -> Vec<(String, Vec<u8>)> {
    let base = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let data = root.join("data");
    let manifest = generate_dataset(base.classes, base.per_class, base.seed, &data).unwrap();
    let noisy_dir = root.join("noisy");
    std::fs::create_dir_all(&noisy_dir).unwrap();
    for q in manifest.queries() {
        let (noisy, _) = corrupt_query(&manifest.load_image(q).unwrap(), q.id, base.seed).unwrap();
        noisy.write_ppm(&noisy_dir.join(&q.file)).unwrap();
    }
    let run_dir = root.join("run");
    train(&base, &manifest).unwrap().write(&run_dir).unwrap();
    let model = Model::load(&run_dir.join(CHECKPOINT_FILE)).unwrap();
    let descriptors = ModelDescriptors::extract(&model, &manifest, Some(base.seed)).unwrap();
    let runs: Vec<EvalRun> = Protocol::ALL
        .into_iter()
        .flat_map(|p| [false, true].map(|noisy| descriptors.evaluate(&manifest, p, noisy).unwrap()))
        .collect();
    let mut files = vec![
        (METRICS_FILE.to_string(), std::fs::read(run_dir.join(METRICS_FILE)).unwrap()),
        (CHECKPOINT_FILE.to_string(), std::fs::read(run_dir.join(CHECKPOINT_FILE)).unwrap()),
        ("eval.csv".to_string(), report_csv(&runs).into_bytes()),
    ];
    let mut noisy_files: Vec<_> = std::fs::read_dir(&noisy_dir).unwrap().map(|e| e.unwrap().path()).collect();
    noisy_files.sort();
    for p in noisy_files {
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
    }
    files
}

fn criterion_8(out: &mut Vec<Outcome>, dir: &Path) {
    let first = pipeline_once(&dir.join("a"));
    let second = pipeline_once(&dir.join("b"));
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let ok = first.len() == second.len() && differing.is_empty();
    report(
        out,
        "8 determinism",
        ok,
        format!("{} artifacts compared (metrics, checkpoint, eval, noisy queries); differing: {differing:?}", first.len()),
    );
}

struct Trained {
    run: TrainRun,
    noisy_medium: f64,
    clean_medium: f64,
    elapsed: Duration,
}

fn train_and_score(cfg: &TrainConfig, manifest: &Manifest) -> Trained {
    let start = Instant::now();
    let run = train(cfg, manifest).unwrap();
    let elapsed = start.elapsed();
    let d = ModelDescriptors::extract(&run.model, manifest, Some(EVAL_SEED)).unwrap();
    Trained {
        noisy_medium: d.evaluate(manifest, Protocol::Medium, true).unwrap().map,
        clean_medium: d.evaluate(manifest, Protocol::Medium, false).unwrap().map,
        run,
        elapsed,
    }
}

fn ablation_configs(seed: u64) -> (TrainConfig, TrainConfig) {
    let full = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let plain = TrainConfig {
        qcb_enabled: false,
        alpha: 0.0,
        beta: 0.0,
        ..full.clone()
    };
    (plain, full)
}

fn criteria_6_and_9(out: &mut Vec<Outcome>, manifest: &Manifest) {
    let start = Instant::now();
    let (plain0, _) = ablation_configs(0);
    let softmax = train_and_score(
        &TrainConfig {
            loss: LossKind::NormSoftmax,
            ..plain0
        },
        manifest,
    );
    let mut slowest = softmax.elapsed;
    let mut plain = Vec::new();
    let mut full = Vec::new();
    for seed in ABLATION_SEEDS {
        let (p, f) = ablation_configs(seed);
        plain.push(train_and_score(&p, manifest));
        full.push(train_and_score(&f, manifest));
    }
    for t in plain.iter().chain(&full) {
        slowest = slowest.max(t.elapsed);
    }
    let total = start.elapsed();

    let gain = plain[0].noisy_medium - softmax.noisy_medium;
    let pass_a = gain >= MARGIN_OVER_SOFTMAX;
    report(
        out,
        "6a NoiRetrieval vs normalized softmax",
        pass_a && slowest < ABLATION_BUDGET,
        format!(
            "noise-mAP Medium {:.4} vs {:.4}: {:+.2} points (need ≥ {:+.1}); slowest run {:.0}s",
            plain[0].noisy_medium,
            softmax.noisy_medium,
            100.0 * gain,
            100.0 * MARGIN_OVER_SOFTMAX,
            slowest.as_secs_f64()
        ),
    );

    let deltas: Vec<f64> = full.iter().zip(&plain).map(|(f, p)| f.noisy_medium - p.noisy_medium).collect();
    let improved = deltas.iter().filter(|&&d| d > 0.0).count();
    let no_big_drop = deltas.iter().all(|&d| d >= -MAX_FULL_MODEL_DROP);
    let pairs: Vec<String> = full
        .iter()
        .zip(&plain)
        .map(|(f, p)| format!("{:.4}/{:.4}", f.noisy_medium, p.noisy_medium))
        .collect();
    report(
        out,
        "6b +QCB +InfoNCE over NoiRetrieval",
        no_big_drop && improved >= 2,
        format!(
            "full/plain per seed {}: deltas {:+.2?} points, improved in {improved}/3, total {:.0}s",
            pairs.join(" "),
            deltas.iter().map(|d| 100.0 * d).collect::<Vec<_>>(),
            total.as_secs_f64()
        ),
    );

    let default_run = &full[0];
    let (clean_q, noisy_q) = query_quality(&default_run.run.model, manifest, EVAL_SEED).unwrap();
    report(
        out,
        "9 quality-norm correlation",
        clean_q - noisy_q >= QUALITY_GAP,
        format!(
            "mean descriptor clean {clean_q:.4} vs corrupted {noisy_q:.4}: gap {:.4} (need ≥ {QUALITY_GAP})",
            clean_q - noisy_q
        ),
    );

    supplementary(out, default_run);
}

/// Measured expectations that ride on the default run.
fn supplementary(out: &mut Vec<Outcome>, default_run: &Trained) {
    let m: &[EpochMetrics] = &default_run.run.metrics;
    let (e1, e10) = (m[0].total, m[9].total);
    report(
        out,
        "   loss decreases (epoch 10 < epoch 1)",
        e10 < e1,
        format!("total loss {e1:.4} → {e10:.4}"),
    );
    report(
        out,
        "   clean mAP ≥ noise mAP (Medium)",
        default_run.clean_medium >= default_run.noisy_medium,
        format!("{:.4} vs {:.4}", default_run.clean_medium, default_run.noisy_medium),
    );
}

fn main() {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut outcomes = Vec::new();

    criterion_1(&mut outcomes);
    criterion_2(&mut outcomes);
    criterion_3(&mut outcomes);
    criterion_4(&mut outcomes, dir.path());
    criterion_5(&mut outcomes);

    let cfg = TrainConfig::default();
    let manifest = generate_dataset(cfg.classes, cfg.per_class, cfg.seed, &dir.path().join("default")).unwrap();
    criterion_7(&mut outcomes, &manifest);
    criterion_8(&mut outcomes, dir.path());
    criteria_6_and_9(&mut outcomes, &manifest);

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.label.trim()).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
