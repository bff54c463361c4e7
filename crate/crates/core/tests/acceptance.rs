//! Acceptance checks 1 to 10. Prints one PASS/FAIL line per criterion and
//! exits nonzero when a criterion fails, unless the only failing part is a
//! documented known gap (reported as FAIL all the same).

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use affect_core::au_pipeline::{fuse_mean, resample, AuModel};
use affect_core::config::{load_config, AuPolicy, ExprScheme};
use affect_core::dataio::{filter_split, DatasetSplit, FilterPolicy, Provenance, SplitName};
use affect_core::expr_ensemble::{meta_vote, TieBreaker};
use affect_core::harness::{self, RunManifest};
use affect_core::losses::{
    ccc_loss_with_grad, composite_classification_loss_with_grad, dice_loss, dice_loss_with_grad,
    finite_difference_check, focal_loss, focal_loss_with_grad, polarity_cross_entropy_with_grad,
};
use affect_core::metrics::{ccc_metric, MetricReport};
use affect_core::nn::{Mode, ParamStore, TransformerBlock, TransformerBlockConfig};
use affect_core::types::{
    AuLabels, ExpressionLabel, FrameRecord, Image, Polarity, Task, VaLabel, VideoSequence, N_AUS, N_EXPR_CLASSES,
};
use affect_core::va_pipeline::{gate_decision, VaModel};
use affect_core::ExperimentConfig;
use candle_core::{Device, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
    /// Failure limited to a part recorded as unattainable at smoke scale.
    known_gap: bool,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xacce_0000 + tag)
}

const FD_EPSILON: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

fn random_probabilities(r: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((n, k), |_| r.random_range(0.05..1.0));
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..20 {
        let n = r.random_range(4..32);
        let targets: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let preds: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let e = finite_difference_check(
            |x| ccc_loss_with_grad(x, &targets).map(|(l, g)| (l.value, g)),
            &preds,
            FD_EPSILON,
        )
        .map_err(err)?;
        record("ccc_loss", e);

        let n = r.random_range(2..8);
        let probs: Vec<f64> = (0..n * N_AUS).map(|_| r.random_range(0.05..0.95)).collect();
        let labels = Array2::from_shape_fn((n, N_AUS), |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
        let mut mask = Array2::from_shape_fn((n, N_AUS), |_| if r.random_bool(0.8) { 1.0 } else { 0.0 });
        mask[[0, 0]] = 1.0;
        let (alpha, gamma) = (r.random_range(0.1..0.9), r.random_range(0.0..3.0));
        let e = finite_difference_check(
            |x| {
                let p = ArrayView2::from_shape((n, N_AUS), x).map_err(|e| affect_core::Error::Shape(e.to_string()))?;
                let (l, g) = focal_loss_with_grad(p, labels.view(), mask.view(), alpha, gamma)?;
                Ok((l.value, g.iter().copied().collect()))
            },
            &probs,
            FD_EPSILON,
        )
        .map_err(err)?;
        record("focal_loss", e);

        let (n, k) = (r.random_range(3..12), r.random_range(2..9));
        let probs: Vec<f64> = random_probabilities(&mut r, n, k).iter().copied().collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let e = finite_difference_check(
            |x| {
                let p = ArrayView2::from_shape((n, k), x).map_err(|e| affect_core::Error::Shape(e.to_string()))?;
                let (l, g) = dice_loss_with_grad(p, &labels)?;
                Ok((l.value, g.iter().copied().collect()))
            },
            &probs,
            FD_EPSILON,
        )
        .map_err(err)?;
        record("dice_loss", e);

        let (n, k) = (r.random_range(3..12), r.random_range(2..9));
        let logits: Vec<f64> = (0..n * k).map(|_| r.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let lambda = r.random_range(0.0..2.0);
        let e = finite_difference_check(
            |x| {
                let z = ArrayView2::from_shape((n, k), x).map_err(|e| affect_core::Error::Shape(e.to_string()))?;
                let (l, g) = composite_classification_loss_with_grad(z, &labels, lambda)?;
                Ok((l.value, g.iter().copied().collect()))
            },
            &logits,
            FD_EPSILON,
        )
        .map_err(err)?;
        record("composite_classification_loss", e);

        let n = r.random_range(2..16);
        let logits: Vec<f64> = (0..n * 3).map(|_| r.random_range(-3.0..3.0)).collect();
        let labels: Vec<Polarity> = (0..n).map(|_| Polarity::ALL[r.random_range(0..3)]).collect();
        let e = finite_difference_check(
            |x| {
                let z = ArrayView2::from_shape((n, 3), x).map_err(|e| affect_core::Error::Shape(e.to_string()))?;
                let (l, g) = polarity_cross_entropy_with_grad(z, &labels)?;
                Ok((l.value, g.iter().copied().collect()))
            },
            &logits,
            FD_EPSILON,
        )
        .map_err(err)?;
        record("polarity_cross_entropy", e);
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(max < FD_TOLERANCE, || format!("max relative error {max:.2e}: {summary}"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{summary}; {:.2}s", elapsed.as_secs_f64()))
}

/// CCC straight from its definition: population moments and a separately
/// computed Pearson correlation.
fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let rho = cov / (sx * sy);
    2.0 * rho * sx * sy / (sx * sx + sy * sy + (mx - my).powi(2))
}

fn criterion_2() -> Check {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(2..=64);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = ccc_metric(&x, &y).map_err(err)?;
        worst = worst.max((got - ccc_oracle(&x, &y)).abs());
    }
    ensure(worst < 1e-9, || format!("max deviation from oracle {worst:.2e}"))?;
    let v = [0.1, -0.4, 0.7, 0.3];
    let identical = ccc_metric(&v, &v).map_err(err)?;
    ensure((identical - 1.0).abs() < 1e-12, || format!("identical vectors gave {identical}"))?;
    let flipped = ccc_metric(&[0.0, 1.0], &[1.0, 0.0]).map_err(err)?;
    ensure((flipped + 1.0).abs() < 1e-12, || format!("[0,1] vs [1,0] gave {flipped}"))?;
    Ok(format!("100 pairs, max deviation {worst:.1e}; hand cases 1 and -1"))
}

fn criterion_3() -> Check {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(1..10);
        let p: Array2<f64> = Array2::from_shape_fn((n, N_AUS), |_| r.random_range(0.01..0.99));
        let y: Array2<f64> = Array2::from_shape_fn((n, N_AUS), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
        let mut m = Array2::from_shape_fn((n, N_AUS), |_| if r.random_bool(0.7) { 1.0 } else { 0.0 });
        m[[0, 0]] = 1.0;
        let (mut bce, mut cells) = (0.0, 0.0);
        for ((&pv, &yv), &mv) in p.iter().zip(&y).zip(&m) {
            if mv == 1.0 {
                bce += -(yv * pv.ln() + (1.0 - yv) * (1.0 - pv).ln());
                cells += 1.0;
            }
        }
        let focal = focal_loss(p.view(), y.view(), m.view(), 0.5, 0.0).map_err(err)?.value;
        worst = worst.max((focal - 0.5 * bce / cells).abs());
    }
    ensure(worst < 1e-9, || format!("gamma 0 deviates from 0.5 x BCE by {worst:.2e}"))?;
    let one = Array2::from_elem((1, 1), 1.0);
    let single = focal_loss(Array2::from_elem((1, 1), 0.5).view(), one.view(), one.view(), 1.0, 2.0)
        .map_err(err)?
        .value;
    let expected = 0.25 * 2f64.ln();
    ensure((single - expected).abs() < 1e-12, || format!("single cell {single} vs {expected}"))?;
    Ok(format!("gamma 0 max deviation {worst:.1e}; single cell {single:.12}"))
}

/// Dice from hard counts over the classes present among the labels.
fn dice_count_oracle(pred: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0.0;
    for c in 0..k {
        if !labels.contains(&c) {
            continue;
        }
        present += 1.0;
        let tp = pred.iter().zip(labels).filter(|(p, y)| **p == c && **y == c).count() as f64;
        let fp = pred.iter().zip(labels).filter(|(p, y)| **p == c && **y != c).count() as f64;
        let fnn = pred.iter().zip(labels).filter(|(p, y)| **p != c && **y == c).count() as f64;
        sum += 2.0 * tp / (2.0 * tp + fp + fnn);
    }
    1.0 - sum / present
}

fn criterion_4() -> Check {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, k) = (r.random_range(1..40), r.random_range(2..=N_EXPR_CLASSES));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let onehot = Array2::from_shape_fn((n, k), |(i, c)| if pred[i] == c { 1.0 } else { 0.0 });
        let soft = dice_loss(onehot.view(), &labels).map_err(err)?.value;
        worst = worst.max((soft - dice_count_oracle(&pred, &labels, k)).abs());
    }
    ensure(worst < 1e-12, || format!("soft vs count dice differ by {worst:.2e}"))?;
    Ok(format!("50 assignments, max difference {worst:.1e}"))
}

/// Vote rules written independently: priority classes in order 2, 3, 5, 1,
/// otherwise the most frequent class; ties go to the highest summed
/// probability, then the smallest index.
fn vote_oracle(decisions: &[usize], probs: Option<&[[f64; N_EXPR_CLASSES]]>) -> usize {
    for p in [2, 3, 5, 1] {
        if decisions.contains(&p) {
            return p;
        }
    }
    let count = |c: usize| decisions.iter().filter(|&&d| d == c).count();
    let best_count = (0..N_EXPR_CLASSES).map(count).max().unwrap();
    let tied: Vec<usize> = (0..N_EXPR_CLASSES).filter(|&c| count(c) == best_count).collect();
    match probs {
        None => tied[0],
        Some(rows) => {
            let score = |c: usize| rows.iter().map(|r| r[c]).sum::<f64>();
            let top = tied.iter().map(|&c| score(c)).fold(f64::NEG_INFINITY, f64::max);
            *tied.iter().find(|&&c| score(c) == top).unwrap()
        }
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_5() -> Check {
    let mut exhaustive = 0;
    for code in 0..512 {
        let d = [code / 64, (code / 8) % 8, code % 8];
        let got = meta_vote(&d, TieBreaker::SmallestIndex).map_err(err)?;
        ensure(got == vote_oracle(&d, None), || format!("{d:?} gave {got}"))?;
        exhaustive += 1;
    }
    let mut r = rng(5);
    let perms = permutations(5);
    for _ in 0..1000 {
        let d: Vec<usize> = (0..5).map(|_| r.random_range(0..N_EXPR_CLASSES)).collect();
        let probs: Vec<[f64; N_EXPR_CLASSES]> = (0..5)
            .map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0)))
            .collect();
        let plain = meta_vote(&d, TieBreaker::SmallestIndex).map_err(err)?;
        let weighted = meta_vote(&d, TieBreaker::MeanProbability(&probs)).map_err(err)?;
        ensure(plain == vote_oracle(&d, None), || format!("{d:?} gave {plain}"))?;
        ensure(weighted == vote_oracle(&d, Some(&probs)), || format!("{d:?} with probabilities gave {weighted}"))?;
        for p in &perms {
            let dp: Vec<usize> = p.iter().map(|&i| d[i]).collect();
            let pp: Vec<[f64; N_EXPR_CLASSES]> = p.iter().map(|&i| probs[i]).collect();
            ensure(meta_vote(&dp, TieBreaker::SmallestIndex).map_err(err)? == plain, || {
                format!("permutation {dp:?} changed the vote")
            })?;
            ensure(meta_vote(&dp, TieBreaker::MeanProbability(&pp)).map_err(err)? == weighted, || {
                format!("permutation {dp:?} changed the weighted vote")
            })?;
        }
    }
    // rule-1 dominance over every vector of non-priority classes up to length 4
    let others = [0, 4, 6, 7];
    let mut dominance = 0;
    for len in 0..=4usize {
        for code in 0..4usize.pow(len as u32) {
            let base: Vec<usize> = (0..len).map(|i| others[(code / 4usize.pow(i as u32)) % 4]).collect();
            for p in [1, 2, 3, 5] {
                for pos in 0..=len {
                    let mut v = base.clone();
                    v.insert(pos, p);
                    let got = meta_vote(&v, TieBreaker::SmallestIndex).map_err(err)?;
                    ensure(got == p, || format!("inserting {p} into {base:?} gave {got}"))?;
                    dominance += 1;
                }
            }
        }
    }
    Ok(format!(
        "{exhaustive} exhaustive n=3 vectors, 1000 random n=5 vectors x {} permutations, {dominance} dominance cases",
        perms.len()
    ))
}

fn fixture_frame(i: usize) -> FrameRecord {
    // per frame index mod 10: 0 VA sentinel, 1 expression -1, 2 expression 7,
    // 3 AU fully unannotated, 4 AU partially unannotated
    let va = if i.is_multiple_of(10) { VaLabel::sentinel() } else { VaLabel::new(0.1, -0.2) };
    let expr = match i % 10 {
        1 => ExpressionLabel::INVALID,
        2 => ExpressionLabel::new(7).unwrap(),
        _ => ExpressionLabel::new((i % 7) as i64).unwrap(),
    };
    let mut aus = [0i8; N_AUS];
    aus[i % N_AUS] = 1;
    match i % 10 {
        3 => aus = [-1; N_AUS],
        4 => aus[5] = -1,
        _ => {}
    }
    FrameRecord {
        video_id: format!("fixture-{}", i / 30),
        frame_index: i % 30,
        image: Image::zeros((4, 4, 3)),
        va: Some(va),
        expr: Some(expr),
        aus: Some(AuLabels::new(aus).unwrap()),
    }
}

fn fixture(split: SplitName) -> DatasetSplit {
    let frames: Vec<FrameRecord> = (0..60).map(fixture_frame).collect();
    let sequences = frames
        .chunks(30)
        .map(|c| VideoSequence::new(c[0].video_id.clone(), c.to_vec()).unwrap())
        .collect();
    DatasetSplit::new(split, sequences, Provenance::Synthetic).unwrap()
}

fn criterion_6() -> Check {
    let policy = |expr_scheme, au_policy| FilterPolicy { expr_scheme, au_policy };
    let drop_frame = policy(ExprScheme::SevenAsClass, AuPolicy::DropFrame);
    let cases = [
        ("va", Task::Va, SplitName::Train, drop_frame, 6),
        ("expr seven-as-class", Task::Expr, SplitName::Train, drop_frame, 6),
        ("expr seven-by-threshold train", Task::Expr, SplitName::Train, policy(ExprScheme::SevenByThreshold, AuPolicy::DropFrame), 12),
        ("expr seven-by-threshold val", Task::Expr, SplitName::Val, policy(ExprScheme::SevenByThreshold, AuPolicy::DropFrame), 6),
        ("au drop-frame", Task::Au, SplitName::Train, drop_frame, 12),
        ("au mask-cells", Task::Au, SplitName::Train, policy(ExprScheme::SevenAsClass, AuPolicy::MaskCells), 6),
    ];
    let mut parts = Vec::new();
    for (name, task, split, pol, expected_removed) in cases {
        let data = fixture(split);
        let before = data.n_frames();
        let removed = before - filter_split(data, task, pol).n_frames();
        ensure(removed == expected_removed, || {
            format!("{name}: removed {removed}, expected {expected_removed}")
        })?;
        parts.push(format!("{name} -{removed}"));
    }
    Ok(parts.join(", "))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct SmokeRun {
    manifest: RunManifest,
    dir: PathBuf,
    elapsed: Duration,
}

struct SmokeRuns {
    _tmp: tempfile::TempDir,
    runs: BTreeMap<(Task, usize), SmokeRun>,
}

fn smoke_config(task: Task) -> ExperimentConfig {
    let path = workspace_root().join(format!("configs/{task}_smoke.toml"));
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Each task's smoke config trained twice with the same seed.
fn smoke_runs() -> &'static SmokeRuns {
    static RUNS: OnceLock<SmokeRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("temp dir");
        let mut runs = BTreeMap::new();
        for task in [Task::Va, Task::Expr, Task::Au] {
            let config = smoke_config(task);
            for rep in 0..2 {
                let dir = tmp.path().join(format!("{task}-{rep}"));
                let start = Instant::now();
                let manifest = harness::run_train(&config, &dir).unwrap_or_else(|e| panic!("{task} training: {e}"));
                runs.insert(
                    (task, rep),
                    SmokeRun {
                        manifest,
                        dir,
                        elapsed: start.elapsed(),
                    },
                );
            }
        }
        SmokeRuns { _tmp: tmp, runs }
    })
}

fn metric(report: &MetricReport, key: &str) -> f64 {
    report
        .key_values()
        .into_iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .unwrap_or_else(|| panic!("report has no {key}"))
}

const SMOKE_BUDGET: Duration = Duration::from_secs(300);

fn criterion_7() -> Outcome {
    let runs = &smoke_runs().runs;
    let mut failures = Vec::new();
    let mut gaps = Vec::new();
    let mut notes = Vec::new();

    let va = &runs[&(Task::Va, 0)];
    let (cv, ca) = (metric(&va.manifest.train_report, "ccc_valence"), metric(&va.manifest.train_report, "ccc_arousal"));
    notes.push(format!("VA train CCC {cv:.3}/{ca:.3}"));
    if !(cv >= 0.8 && ca >= 0.8) {
        failures.push(format!("VA train CCC {cv:.3}/{ca:.3} below 0.8"));
    }

    let expr = &runs[&(Task::Expr, 0)];
    let subs = &expr.manifest.member_reports;
    if subs.len() != 5 {
        failures.push(format!("{} sub-classifiers, expected 5", subs.len()));
    }
    let accs: Vec<f64> = subs.iter().map(|m| metric(&m.train, "accuracy")).collect();
    notes.push(format!("EXPR sub train acc min {:.3}", accs.iter().copied().fold(1.0, f64::min)));
    if accs.iter().any(|&a| a < 0.95) {
        failures.push(format!("EXPR sub train accuracy {accs:.3?}"));
    }
    match &expr.manifest.val_report {
        None => failures.push("EXPR run has no held-out slice".into()),
        Some(val) => {
            let fused = metric(val, "f1_final");
            let best = subs
                .iter()
                .filter_map(|m| m.val.as_ref().map(|v| metric(v, "f1_final")))
                .fold(f64::NEG_INFINITY, f64::max);
            notes.push(format!("EXPR held-out F1 ensemble {fused:.3} vs best sub {best:.3}"));
            if fused < best {
                gaps.push(format!("EXPR ensemble held-out F1 {fused:.3} < best sub {best:.3}"));
            }
        }
    }

    let au = &runs[&(Task::Au, 0)];
    let f1 = metric(&au.manifest.train_report, "mean_f1");
    notes.push(format!("AU train mean F1 {f1:.3}"));
    if f1 < 0.9 {
        failures.push(format!("AU train mean F1 {f1:.3} below 0.9"));
    }

    for (task, run) in [("VA", va), ("EXPR", expr), ("AU", au)] {
        notes.push(format!("{task} {:.0}s", run.elapsed.as_secs_f64()));
        if run.elapsed > SMOKE_BUDGET {
            failures.push(format!("{task} took {:?}", run.elapsed));
        }
    }
    let known_gap = failures.is_empty() && !gaps.is_empty();
    failures.extend(gaps);
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            notes.join("; ")
        } else {
            format!("{} (measured: {})", failures.join("; "), notes.join("; "))
        },
        known_gap,
    }
}

fn criterion_8() -> Check {
    let run = &smoke_runs().runs[&(Task::Va, 0)];
    let ckpt = run.dir.join("checkpoints/va.json");
    let model = VaModel::from_checkpoint(&affect_core::checkpoint::Checkpoint::load(&ckpt).map_err(err)?).map_err(err)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let (mut extreme, mut total) = (0, 0);
    for split in [SplitName::Train, SplitName::Val] {
        let out = tmp.path().join(split.as_str());
        harness::run_export(std::slice::from_ref(&ckpt), split, Some(Task::Va), &out).map_err(err)?;
        let data = harness::load_raw_split(model.config(), split).map_err(err)?;
        for seq in &data.sequences {
            let text = fs::read_to_string(out.join(format!("{}.txt", seq.video_id))).map_err(err)?;
            let rows: Vec<&str> = text.lines().skip(1).collect();
            ensure(rows.len() == seq.frames.len(), || format!("{}: {} rows", seq.video_id, rows.len()))?;
            for (frame, row) in seq.frames.iter().zip(rows) {
                let exported: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
                let (pv, pa) = model
                    .predict_polarity(&model.fuse_features(&frame.image).map_err(err)?)
                    .map_err(err)?;
                let out = model.forward_va(&frame.image).map_err(err)?;
                for (probs, value, written) in [(pv, out.valence, exported[0]), (pa, out.arousal, exported[1])] {
                    total += 1;
                    let expected = match gate_decision(&probs) {
                        Polarity::NegExtreme => -1.0,
                        Polarity::PosExtreme => 1.0,
                        Polarity::Interior => {
                            ensure(value.abs() < 1.0 && written.abs() < 1.0, || {
                                format!("{}#{} interior frame exported {written}", frame.video_id, frame.frame_index)
                            })?;
                            continue;
                        }
                    };
                    extreme += 1;
                    ensure(value.to_bits() == f64::to_bits(expected) && written.to_bits() == f64::to_bits(expected), || {
                        format!("{}#{} extreme frame gave {value} / exported {written}", frame.video_id, frame.frame_index)
                    })?;
                }
            }
        }
    }
    ensure(extreme > 0, || "no frame was gated extreme".to_string())?;
    Ok(format!("{extreme} of {total} gated values exactly +-1"))
}

fn criterion_9() -> Check {
    let dev = Device::Cpu;
    let mut config = ExperimentConfig::defaults(Task::Au);
    config.image_size = 16;
    let model = AuModel::new(&config, 9).map_err(err)?;
    let d = model.feature_dim();
    let mut lengths = Vec::new();
    let mut bit_mismatch = 0;
    for t in [1usize, 5, 256] {
        let feats = Tensor::randn(0f32, 1.0, (2, t, d), &dev).map_err(err)?;
        let out = model.forward_features(&feats, None, &mut Mode::Eval).map_err(err)?;
        for y in std::iter::once(&out.fused).chain(out.pipelines.iter()) {
            let dims = y.dims3().map_err(err)?;
            ensure(dims == (2, t, N_AUS), || format!("T={t} gave {dims:?}"))?;
        }
        let flat = |x: &Tensor| x.flatten_all().and_then(|x| x.to_vec1::<f32>()).map_err(err);
        let (p1, p2, p3) = (flat(&out.pipelines[0])?, flat(&out.pipelines[1])?, flat(&out.pipelines[2])?);
        let third = (1.0f64 / 3.0) as f32;
        let fused = flat(&out.fused)?;
        let standalone = flat(&fuse_mean(&out.pipelines[0], &out.pipelines[1], &out.pipelines[2]).map_err(err)?)?;
        for i in 0..fused.len() {
            let mean = ((p1[i] + p2[i]) + p3[i]) * third;
            if fused[i].to_bits() != mean.to_bits() || standalone[i].to_bits() != mean.to_bits() {
                bit_mismatch += 1;
            }
        }
        let seq = Array2::from_shape_fn((t, 3), |(_, j)| j as f64 - 0.5);
        ensure(resample(&seq, config.resample_up, config.resample_down).map_err(err)?.nrows() == t, || {
            format!("resample changed length {t}")
        })?;
        lengths.push(t);
    }
    ensure(bit_mismatch == 0, || format!("{bit_mismatch} fused logits differ from the mean"))?;

    let mut store = ParamStore::new();
    let block_cfg = TransformerBlockConfig {
        layers: 2,
        heads: 4,
        model_dim: 16,
        feedforward_dim: 32,
        positional_encoding: false,
    };
    let block = TransformerBlock::new(&mut store, "block", block_cfg, &mut rng(9)).map_err(err)?;
    let t = 9;
    let x = Tensor::randn(0f32, 1.0, (1, t, 16), &dev).map_err(err)?;
    let perm: Vec<u32> = vec![4, 7, 0, 8, 2, 1, 6, 3, 5];
    let idx = Tensor::new(perm.as_slice(), &dev).map_err(err)?;
    let y = block.forward(&x, None, &mut Mode::Eval).map_err(err)?;
    let y_perm = block
        .forward(&x.index_select(&idx, 1).map_err(err)?, None, &mut Mode::Eval)
        .map_err(err)?;
    let diff = (y.index_select(&idx, 1).map_err(err)? - y_perm)
        .and_then(|d| d.abs())
        .and_then(|d| d.flatten_all())
        .and_then(|d| d.max(0))
        .and_then(|d| d.to_scalar::<f32>())
        .map_err(err)?;
    ensure(diff < 1e-5, || format!("permuted output differs by {diff}"))?;

    let mut worst: f64 = 0.0;
    for t in [1usize, 2, 5, 16, 256] {
        for f in [1usize, 2, 3, 4] {
            let c = Array2::from_elem((t, 4), 0.7315);
            let out = resample(&c, f, f).map_err(err)?;
            worst = out.iter().map(|v| (v - 0.7315).abs()).fold(worst, f64::max);
        }
    }
    ensure(worst < 1e-12, || format!("constant sequence moved by {worst:.2e}"))?;
    Ok(format!(
        "lengths {lengths:?} preserved, permutation diff {diff:.1e}, fusion bit-exact, resample fixed point {worst:.1e}"
    ))
}

/// Compares two JSON documents; numbers within `tol`, everything else exact.
/// Keys in `skip` are ignored at any depth.
fn json_diff(a: &serde_json::Value, b: &serde_json::Value, tol: f64, skip: &[&str], path: &str, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() > tol {
                out.push(format!("{path}: {x} vs {y}"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            if x.keys().ne(y.keys()) {
                out.push(format!("{path}: key sets differ"));
                return;
            }
            for (k, v) in x {
                if !skip.contains(&k.as_str()) {
                    json_diff(v, &y[k], tol, skip, &format!("{path}.{k}"), out);
                }
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                out.push(format!("{path}: lengths {} vs {}", x.len(), y.len()));
                return;
            }
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                json_diff(u, v, tol, skip, &format!("{path}[{i}]"), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10() -> Check {
    let runs = &smoke_runs().runs;
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut notes = Vec::new();
    for task in [Task::Va, Task::Expr, Task::Au] {
        let (a, b) = (&runs[&(task, 0)], &runs[&(task, 1)]);
        let read = |dir: &Path| -> std::result::Result<serde_json::Value, String> {
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).map_err(err)?).map_err(err)
        };
        let mut diffs = Vec::new();
        json_diff(&read(&a.dir)?, &read(&b.dir)?, 1e-6, &["timings"], "manifest", &mut diffs);
        ensure(diffs.is_empty(), || format!("{task}: {}", diffs.join("; ")))?;

        let mut exports = Vec::new();
        for (rep, run) in [(0, a), (1, b)] {
            let out = tmp.path().join(format!("{task}-{rep}"));
            harness::run_export(std::slice::from_ref(&run.dir), SplitName::Val, Some(task), &out).map_err(err)?;
            exports.push(files_under(&out));
        }
        ensure(!exports[0].is_empty(), || format!("{task}: export wrote no files"))?;
        ensure(exports[0] == exports[1], || format!("{task}: export files differ"))?;
        notes.push(format!("{task} {} files", exports[0].len()));
    }
    Ok(format!("manifests agree within 1e-6 (timings excluded); identical exports: {}", notes.join(", ")))
}

fn run_check(f: fn() -> Check) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(detail)) => Outcome {
            pass: true,
            detail,
            known_gap: false,
        },
        Ok(Err(detail)) => Outcome {
            pass: false,
            detail,
            known_gap: false,
        },
        Err(p) => Outcome {
            pass: false,
            detail: panic_message(p),
            known_gap: false,
        },
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .map(|m| format!("panicked: {m}"))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    let checks: [Criterion; 10] = [
        (1, "loss gradients", || run_check(criterion_1)),
        (2, "ccc oracle", || run_check(criterion_2)),
        (3, "focal reductions", || run_check(criterion_3)),
        (4, "dice bridge", || run_check(criterion_4)),
        (5, "meta-vote", || run_check(criterion_5)),
        (6, "filtering counts", || run_check(criterion_6)),
        (7, "overfit smoke", || {
            catch_unwind(criterion_7).unwrap_or_else(|p| Outcome {
                pass: false,
                detail: panic_message(p),
                known_gap: false,
            })
        }),
        (8, "gating exactness", || run_check(criterion_8)),
        (9, "architecture contracts", || run_check(criterion_9)),
        (10, "determinism", || run_check(criterion_10)),
    ];
    let (mut passed, mut gaps, mut blocking) = (0, 0, 0);
    for (n, name, check) in checks {
        let o = check();
        report(n, name, &o);
        match (o.pass, o.known_gap) {
            (true, _) => passed += 1,
            (false, true) => gaps += 1,
            (false, false) => blocking += 1,
        }
    }
    println!("{passed} of {} criteria passed; {gaps} known gap(s)", checks.len());
    if blocking > 0 {
        std::process::exit(1);
    }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let gap = if o.known_gap { " [known gap]" } else { "" };
    println!("{status} criterion {n:>2} {name}{gap}: {}", o.detail);
}
