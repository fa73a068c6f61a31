//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines are always printed; exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use histovote::augment::{execute_plan, plan_balance};
use histovote::ensemble::*;
use histovote::fixtures::breakhis_shaped_manifest;
use histovote::manifest::{Manifest, SampleRecord, Split, SplitRatios, stratified_split};
use histovote::metrics::*;
use histovote::predictions::{PredictionTable, align, parse_predictions, render_predictions};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn split_reproduction() -> Outcome {
    let m = breakhis_shaped_manifest();
    ensure(m.class_counts() == [2480, 5429], || format!("fixture totals {:?}", m.class_counts()))?;
    let ratios: SplitRatios = "7:1:2".parse().map_err(|e| format!("{e}"))?;
    let mut slowest = Duration::ZERO;
    let seeds = [0u64, 1, 7, 42, 1234, 99_999, u64::MAX];
    for seed in seeds {
        let start = Instant::now();
        let s = stratified_split(&m, &ratios, seed).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed());
        let counts = s.split_counts();
        ensure(counts == [[1736, 248, 496], [3800, 543, 1086]], || format!("seed {seed}: {counts:?}"))?;
    }
    ensure(slowest < Duration::from_secs(1), || format!("slowest split took {slowest:?}"))?;
    Ok(format!(
        "benign (1736, 248, 496), malignant (3800, 543, 1086) for {} seeds, slowest {slowest:.2?}",
        seeds.len()
    ))
}

fn augmentation_reproduction() -> Outcome {
    let ratios: SplitRatios = "7:1:2".parse().map_err(|e| format!("{e}"))?;
    let m = stratified_split(&breakhis_shaped_manifest(), &ratios, 42).map_err(|e| e.to_string())?;
    let plan = plan_balance(&m, 42).map_err(|e| e.to_string())?;
    let counts = plan.counts();
    let hflips = counts.map(|[h, _]| h);
    let vflips = counts.map(|[_, v]| v);
    ensure(hflips == [1736, 248, 496], || format!("hflips {hflips:?}"))?;
    ensure(vflips == [328, 47, 94], || format!("vflips {vflips:?}"))?;
    let total_v: usize = vflips.iter().sum();
    ensure(total_v == 469, || format!("vflip total {total_v}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tiny = RgbImage::from_fn(2, 2, |x, y| Rgb([x as u8 * 200, y as u8 * 200, 50]));
    for r in m.records() {
        let path = dir.path().join(&r.path);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        tiny.save(&path).map_err(|e| e.to_string())?;
    }
    let out = execute_plan(&plan, &m, dir.path(), dir.path()).map_err(|e| e.to_string())?;
    let totals = out.split_totals();
    ensure(totals == [7600, 1086, 2172], || format!("post-execution totals {totals:?}"))?;
    let missing = out.records().iter().filter(|r| !dir.path().join(&r.path).is_file()).count();
    ensure(missing == 0, || format!("{missing} manifest paths have no file"))?;
    Ok(format!(
        "hflips {hflips:?}, vflips {vflips:?} (sum {total_v}), {} images written, totals {totals:?}",
        plan.len()
    ))
}

fn headline_accuracy() -> Outcome {
    // 543 benign and 543 malignant validation images; one benign image is
    // called malignant and eleven malignant images are called benign.
    let mut records = Vec::new();
    let mut rows = BTreeMap::new();
    for (class, tag, wrong) in [(0usize, "b", 1usize), (1, "m", 11)] {
        for i in 0..543 {
            let id = format!("{tag}{i:03}");
            let mut r = SampleRecord::original(id.clone(), format!("{id}.png"), class);
            r.split = Some(Split::Val);
            records.push(r);
            let called = if i < wrong { 1 - class } else { class };
            rows.insert(id, if called == 0 { vec![0.875, 0.125] } else { vec![0.25, 0.75] });
        }
    }
    let m = Manifest::new(vec!["benign".into(), "malignant".into()], records).map_err(|e| e.to_string())?;
    let table = PredictionTable::new("ensemble", m.classes().to_vec(), rows).map_err(|e| e.to_string())?;
    let text = render_predictions(&table);
    let parsed = parse_predictions(&text, "fixture", &m, Some(Split::Val)).map_err(|e| e.to_string())?;
    let ap = align(&[parsed], &m, Some(Split::Val)).map_err(|e| e.to_string())?;
    let (labels, scores) = weighted_soft_vote(&ap, &WeightVector::uniform(1).unwrap()).map_err(|e| e.to_string())?;
    let decisions: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
    let r = evaluate(&decisions, &scores, ap.truth(), ap.sample_ids(), ap.classes(), 0, 1.0).map_err(|e| e.to_string())?;
    let rows = r.confusion.rows();
    ensure(rows == [vec![542, 11], vec![1, 532]], || format!("confusion {rows:?}"))?;
    ensure((r.accuracy - 0.98895).abs() <= 5e-5, || format!("accuracy {}", r.accuracy))?;
    Ok(format!("confusion [[TP 542, FP 11], [FN 1, TN 532]], accuracy {:.5}", r.accuracy))
}

fn pruning_fixture() -> Outcome {
    let models = [
        ("VGG16", 95.49),
        ("VGG19", 95.03),
        ("InceptionV3", 93.83),
        ("Xception", 96.59),
        ("ResNet50", 98.90),
        ("DenseNet201", 98.25),
    ];
    let ids: Vec<String> = models.iter().map(|(n, _)| n.to_string()).collect();
    let acc: Vec<f64> = models.iter().map(|(_, a)| *a).collect();
    let kept = prune(&ids, &acc, 4).map_err(|e| e.to_string())?;
    let names: Vec<&str> = kept.iter().map(|&i| ids[i].as_str()).collect();
    ensure(names == ["VGG16", "Xception", "ResNet50", "DenseNet201"], || format!("kept {names:?}"))?;
    Ok(format!("kept {names:?}"))
}

#[allow(clippy::needless_range_loop)]
fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    };
    for case in 0..1000 {
        let c = rng.random_range(2..6);
        let mut rows: Vec<Vec<u64>> = (0..c)
            .map(|_| (0..c).map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..500) }).collect())
            .collect();
        if rows.iter().flatten().all(|&v| v == 0) {
            rows[0][0] = 1;
        }
        let beta = rng.random_range(0.1..4.0);
        let cm = ConfusionMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let positive = rng.random_range(0..c);
        let m = classification_metrics(&cm, positive, beta).map_err(|e| e.to_string())?;
        let total: u64 = rows.iter().flatten().sum();
        let trace: u64 = (0..c).map(|i| rows[i][i]).sum();
        ensure((m.accuracy - trace as f64 / total as f64).abs() <= 1e-12, || format!("case {case}: accuracy"))?;
        ensure(m.positive_class == positive, || format!("case {case}: positive class"))?;
        for k in 0..c {
            let tp = rows[k][k] as f64;
            let fp: f64 = (0..c).filter(|&t| t != k).map(|t| rows[k][t] as f64).sum();
            let fn_: f64 = (0..c).filter(|&o| o != k).map(|o| rows[o][k] as f64).sum();
            let precision = (tp + fp > 0.0).then(|| tp / (tp + fp));
            let recall = (tp + fn_ > 0.0).then(|| tp / (tp + fn_));
            // Count form of F-beta; absent when precision or recall is, or both are zero.
            let fb = |b: f64| {
                let b2 = b * b;
                (precision.is_some() && recall.is_some() && tp > 0.0).then(|| (1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * fn_ + fp))
            };
            let s = m.per_class[k];
            ensure(close(s.precision, precision), || format!("case {case} class {k}: precision"))?;
            ensure(close(s.recall, recall), || format!("case {case} class {k}: recall"))?;
            ensure(close(s.f1, fb(1.0)), || format!("case {case} class {k}: f1 {:?} vs {:?}", s.f1, fb(1.0)))?;
            ensure(close(s.fbeta, fb(beta)), || format!("case {case} class {k}: fbeta"))?;
        }
    }

    let mut rankings = 0;
    for len in 1..=8usize {
        for mask in 0u32..(1 << len) {
            let rel: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
            let oracle = brute_force_ap(&rel);
            ensure(ranked_average_precision(rel.iter().copied()) == oracle, || format!("ranking {rel:?}"))?;
            // The same ranking reached through scores and sample ids, fed in reverse.
            if let Some(expected) = oracle {
                let ids: Vec<String> = sample_ids(len).into_iter().rev().collect();
                let scores: Vec<f64> = (0..len).map(|i| i as f64).collect();
                let truth: Vec<usize> = rel.iter().rev().map(|&r| usize::from(!r)).collect();
                let got = average_precision(&scores, &truth, &ids, 0).map_err(|e| e.to_string())?;
                ensure(got == expected, || format!("scored ranking {rel:?}: {got} vs {expected}"))?;
            }
            rankings += 1;
        }
    }
    Ok(format!("1000 random confusion matrices within 1e-12; AP exact on all {rankings} rankings of 1..=8 items"))
}

fn ensemble_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let instances = 200;
    for case in 0..instances {
        let t = rng.random_range(1..6);
        let n = rng.random_range(1..40);
        let c = rng.random_range(2..5);
        let ap = random_aligned(&mut rng, t, n, c, true);

        // Basis reproduction.
        for i in 0..t {
            let (labels, _) = weighted_soft_vote(&ap, &WeightVector::basis(t, i).unwrap()).map_err(|e| e.to_string())?;
            let direct: Vec<usize> = (0..n).map(|s| first_max(ap.scores(s, i))).collect();
            ensure(labels == direct, || format!("case {case}: basis {i} differs from classifier {i}"))?;
        }

        // Argmax scale invariance.
        let w = dyadic_weights(&mut rng, t);
        let (base, _) = weighted_vote_raw(&ap, &w).map_err(|e| e.to_string())?;
        for s in [0.125, 3.0, 1000.0] {
            let scaled: Vec<f64> = w.iter().map(|x| x * s).collect();
            let (labels, _) = weighted_vote_raw(&ap, &scaled).map_err(|e| e.to_string())?;
            ensure(labels == base, || format!("case {case}: scaling by {s} changed a decision"))?;
        }

        // Unanimity: every mode follows classifiers that all agree.
        let winners: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let agreeing: Vec<Vec<Vec<f64>>> = (0..t)
            .map(|_| {
                winners
                    .iter()
                    .map(|&j| {
                        let mut row: Vec<f64> = dyadic_row(&mut rng, c, 32).iter().map(|v| v / 4.0).collect();
                        row[j] += 0.75;
                        row
                    })
                    .collect()
            })
            .collect();
        let un = aligned_from(&agreeing, ap.truth().to_vec(), c);
        let wv = WeightVector::new(w.clone()).map_err(|e| e.to_string())?;
        let acc: Vec<f64> = (0..t).map(|_| rng.random_range(0.55..0.99)).collect();
        let expected: Vec<Option<usize>> = winners.iter().map(|&j| Some(j)).collect();
        for config in [
            EnsembleConfig { mode: VoteMode::SoftWeighted, weights: Some(wv.clone()), ..Default::default() },
            EnsembleConfig { mode: VoteMode::HardWeighted, weights: Some(wv.clone()), ..Default::default() },
            EnsembleConfig { mode: VoteMode::AbsoluteMajority, ..Default::default() },
            EnsembleConfig { mode: VoteMode::RelativeMajority, ..Default::default() },
            EnsembleConfig {
                mode: VoteMode::BayesLogOdds,
                priors: Some(vec![1.0 / c as f64; c]),
                accuracies: Some(acc),
                ..Default::default()
            },
        ] {
            let out = combine(&un, &config).map_err(|e| e.to_string())?;
            ensure(out.decisions == expected, || format!("case {case}: unanimity broken in mode {}", config.mode))?;
        }

        // Permutation equivariance.
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let per_model: Vec<Vec<Vec<f64>>> = perm.iter().map(|&m| ap.model_scores(m)).collect();
        let pap = aligned_from(&per_model, ap.truth().to_vec(), c);
        let pw = WeightVector::new(perm.iter().map(|&m| w[m]).collect()).map_err(|e| e.to_string())?;
        let a = weighted_soft_vote(&ap, &wv).map_err(|e| e.to_string())?;
        let b = weighted_soft_vote(&pap, &pw).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("case {case}: permutation {perm:?} changed the soft vote"))?;
        ensure(hard_vote_relative(&ap) == hard_vote_relative(&pap), || format!("case {case}: relative vote"))?;
        ensure(hard_vote_absolute(&ap) == hard_vote_absolute(&pap), || format!("case {case}: absolute vote"))?;

        // Search dominance.
        let small = random_aligned(&mut rng, t.min(3), n, c, false);
        let r = search_weights(&small, GridStep::new(4).unwrap(), 1).map_err(|e| e.to_string())?;
        for m in 0..small.n_models() {
            let labels: Vec<usize> = (0..n).map(|s| first_max(small.scores(s, m))).collect();
            let single = accuracy(&labels, small.truth());
            ensure(r.best_objective >= single, || format!("case {case}: search {} < classifier {m} {single}", r.best_objective))?;
        }
    }

    let mut grids = 0;
    for t in 1..=4u32 {
        for (step, k) in [("1", 1u32), ("0.5", 2), ("0.25", 4), ("0.1", 10), ("0.01", 100)] {
            let g: GridStep = step.parse().map_err(|e| format!("{e}"))?;
            let expected = binomial(u64::from(k + t - 1), u64::from(t - 1));
            ensure(composition_count(g.divisions(), t) == expected, || format!("T={t} step={step}: formula"))?;
            if k <= 10 {
                ensure(compositions(k, t as usize).len() as u128 == expected, || format!("T={t} step={step}: enumeration"))?;
                let ap = random_aligned(&mut rng, t as usize, 3, 2, false);
                let r = search_weights(&ap, g, 0).map_err(|e| e.to_string())?;
                ensure(u128::from(r.evaluated_count) == expected, || format!("T={t} step={step}: search visited {}", r.evaluated_count))?;
            }
            grids += 1;
        }
    }
    Ok(format!(
        "basis, scale, unanimity, permutation and dominance held on {instances} instances each; {grids} grid sizes match C(K+T-1, T-1)"
    ))
}

fn search_performance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ap = random_aligned(&mut rng, 4, 2172, 2, false);
    let step: GridStep = "0.01".parse().map_err(|e| format!("{e}"))?;
    let mut results = Vec::new();
    let mut times = Vec::new();
    for workers in [1usize, 2, 8] {
        let start = Instant::now();
        let r = search_weights(&ap, step, workers).map_err(|e| e.to_string())?;
        times.push(start.elapsed());
        ensure(r.evaluated_count == 176_851, || format!("evaluated {}", r.evaluated_count))?;
        results.push(format!("{r:?}"));
    }
    ensure(results.iter().all(|r| r == &results[0]), || "results differ across worker counts".into())?;
    let slowest = times.iter().max().copied().unwrap_or_default();
    ensure(slowest <= Duration::from_secs(60), || format!("slowest run took {slowest:.2?}"))?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok(format!(
        "176851 points x 2172 samples; identical for 1/2/8 workers; times {:.2?}/{:.2?}/{:.2?} on {cores} core(s)",
        times[0], times[1], times[2]
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("split reproduction", split_reproduction),
        ("augmentation reproduction", augmentation_reproduction),
        ("headline accuracy arithmetic", headline_accuracy),
        ("pruning fixture", pruning_fixture),
        ("metric oracle suite", metric_oracle),
        ("ensemble property suite", ensemble_properties),
        ("search performance and determinism", search_performance),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let line = match outcome {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                format!("FAIL  {name}: {why}")
            }
        };
        writeln!(out, "{line}").ok();
        out.flush().ok();
    }
    writeln!(out, "acceptance: {} passed, {failed} failed", criteria.len() - failed).ok();
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
