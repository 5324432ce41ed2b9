//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use oodkit::data::{FeatureVector, OodMode};
use oodkit::gbm::{BoostedClassifier, GbmParams, TreeNode};
use oodkit::harness::{self, BenchmarkConfig, BenchmarkOutcome, Method};
use oodkit::iforest::{self, ForestParams, IsolationForest};
use oodkit::metrics::{self, ScorePair};
use oodkit::nn::SoftmaxClassifier;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ood_error_identity() -> Outcome {
    let (n_in, n_out) = (10_000usize, 4652usize);
    let accepted_out = (0.7704 * n_out as f64).round() as usize;
    let mut ins = vec![0.9; n_in - 500];
    ins.extend(vec![0.1; 500]);
    let mut outs = vec![0.95; accepted_out];
    outs.extend(vec![0.05; n_out - accepted_out]);
    let tau = metrics::threshold_at_tpr(&ins, 0.95).unwrap();
    let err = metrics::ood_error(
        &metrics::verdicts_at_threshold(&ins, tau),
        &metrics::verdicts_at_threshold(&outs, tau),
    )
    .unwrap();
    let fpr = metrics::fpr_at_tpr(&ScorePair::new(ins, outs).unwrap(), 0.95).unwrap();
    outcome(
        (err - 0.2787).abs() <= 0.0005 && (fpr - 0.7704).abs() <= 0.0005,
        format!("ood_error {err:.5} (target 0.2787 +- 0.0005), fpr {fpr:.5}"),
    )
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_in = rng.random_range(1..=50);
        let n_out = rng.random_range(1..=50);
        // A coarse grid forces many ties; some pairs also share exact values.
        let levels = rng.random_range(2..=12) as f64;
        let mut draw = |n| -> Vec<f64> { (0..n).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect() };
        let ins = draw(n_in);
        let mut outs = draw(n_out);
        outs[0] = ins[0];
        let fast = metrics::auroc(&ScorePair::new(ins.clone(), outs.clone()).unwrap());
        worst = worst.max((fast - brute_auroc(&ins, &outs)).abs());
    }
    outcome(worst < 1e-12, format!("max |rank - pairwise| = {worst:e} over 200 pairs"))
}

fn iforest_fixed_point() -> Outcome {
    let mut ok = true;
    for psi in [2usize, 3, 16, 256] {
        ok &= iforest::score_from_path_length(iforest::expected_path_c(psi), psi) == 0.5;
    }
    let c3 = iforest::expected_path_c(3);
    ok &= (c3 - 1.2074).abs() <= 1e-4 && (c3 - reference_c(3)).abs() < 1e-15;
    outcome(ok, format!("score(c(psi)) == 0.5 exactly, c(3) = {c3:.6}"))
}

fn isolation_separation() -> Outcome {
    let mut wins = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut data: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.random_range(-0.01..0.01)]).collect();
        data.push(vec![10.0]);
        let forest = IsolationForest::fit(
            &data,
            &ForestParams {
                n_trees: 100,
                sample_size: None,
                seed,
            },
        )
        .unwrap();
        let outlier = forest.anomaly_score(&data[9]).unwrap();
        if data[..9].iter().all(|x| forest.anomaly_score(x).unwrap() < outlier) {
            wins += 1;
        }
    }
    outcome(wins >= 19, format!("outlier above every inlier in {wins}/20 seeds"))
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let d = rng.random_range(2..=5);
        let h = rng.random_range(2..=6);
        let m = rng.random_range(2..=4);
        let mut model = SoftmaxClassifier::init(d, h, m, k).unwrap();
        for p in model.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let x = FeatureVector::new((0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let mut grad = vec![0.0; model.params().len()];
        model.accumulate_loss_gradient(&x, &target, 1.0, &mut grad).unwrap();
        for (a, n) in grad.iter().zip(fd_param_gradient(&model, &x, &target)) {
            worst = worst.max(relative_error(*a, n));
        }
        for class in 0..m {
            let g = model.input_gradient(&x, class).unwrap();
            for (a, n) in g.as_slice().iter().zip(fd_input_gradient(&model, &x, class)) {
                worst = worst.max(relative_error(*a, n));
            }
        }
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:e} over 50 models"))
}

fn gbm_stumps_and_monotone_loss(runs: &[(u64, BenchmarkOutcome)]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(2..=8);
        let xs: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 6.0).floor() / 2.0).collect();
        let ys: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if ys.iter().all(|&y| y) || !ys.iter().any(|&y| y) {
            continue;
        }
        checked += 1;
        let points: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let params = GbmParams {
            n_trees: 1,
            max_depth: 1,
            learning_rate: 1.0,
            balance_classes: false,
        };
        let model = BoostedClassifier::fit(&points, &ys, &params).unwrap();
        let base = ys.iter().filter(|&&y| y).count() as f64 / n as f64;
        let residuals: Vec<f64> = ys.iter().map(|&y| f64::from(u8::from(y)) - base).collect();
        let newton = |idx: &[usize]| {
            let num: f64 = idx.iter().map(|&i| residuals[i]).sum();
            num / (idx.len() as f64 * base * (1.0 - base)).max(1e-6)
        };
        let nodes = model.trees()[0].nodes();
        let matched = match (brute_stump(&xs, &residuals), &nodes[0]) {
            (None, TreeNode::Leaf { value }) => (value - newton(&(0..n).collect::<Vec<_>>())).abs() < 1e-9,
            (Some((t, l, r)), TreeNode::Split { feature: 0, threshold, left, right }) => {
                let leaf = |i: usize| match nodes[i] {
                    TreeNode::Leaf { value } => value,
                    TreeNode::Split { .. } => f64::NAN,
                };
                *threshold == t
                    && (leaf(*left) - newton(&l)).abs() < 1e-9
                    && (leaf(*right) - newton(&r)).abs() < 1e-9
            }
            _ => false,
        };
        if !matched {
            mismatches += 1;
        }
    }

    let mut worst_increase = f64::NEG_INFINITY;
    for (_, run) in runs {
        let (exposure_idx, _) = run_config(run).exposure_pool();
        let val: Vec<_> = harness::predict_all(&run.model, &features(&run.data.dataset.validation)).unwrap();
        let ood = harness::predict_all(&run.model, &run.data.pools[exposure_idx].samples).unwrap();
        let points: Vec<&[f64]> = val.iter().chain(&ood).map(|p| p.as_slice()).collect();
        let labels: Vec<bool> = (0..points.len()).map(|i| i >= val.len()).collect();
        let boosted = run
            .detectors
            .iter()
            .find(|(m, _)| *m == Method::GradientBoosting)
            .and_then(|(_, d)| d.boosted())
            .unwrap();
        let staged = boosted.staged_log_loss(&points, &labels).unwrap();
        for w in staged.windows(2) {
            worst_increase = worst_increase.max(w[1] - w[0]);
        }
    }
    outcome(
        mismatches == 0 && worst_increase <= 1e-9,
        format!("{mismatches}/200 stump mismatches; largest per-stage loss increase {worst_increase:e}"),
    )
}

fn features(samples: &[oodkit::LabeledSample]) -> Vec<FeatureVector> {
    samples.iter().map(|s| s.features.clone()).collect()
}

fn run_config(run: &BenchmarkOutcome) -> BenchmarkConfig {
    BenchmarkConfig {
        seed: run.report.seed,
        ..BenchmarkConfig::default()
    }
}

fn method_ordering(runs: &[(u64, BenchmarkOutcome)]) -> Outcome {
    let n = runs.len() as f64;
    let mean = |m: Method, f: fn(&oodkit::MetricsRow) -> f64| {
        runs.iter().map(|(_, r)| f(r.report.mean(m).unwrap())).sum::<f64>() / n
    };
    let errors: Vec<(Method, f64)> = Method::ALL.iter().map(|&m| (m, mean(m, |r| r.ood_error))).collect();
    let gbm_err = mean(Method::GradientBoosting, |r| r.ood_error);
    let lowest = errors
        .iter()
        .all(|&(m, e)| m == Method::GradientBoosting || gbm_err < e);
    let gbm_auc = mean(Method::GradientBoosting, |r| r.auroc);
    let base_auc = mean(Method::Baseline, |r| r.auroc);
    let forest_auc = mean(Method::IsolationForest, |r| r.auroc);
    let summary: Vec<String> = errors.iter().map(|(m, e)| format!("{m} {e:.4}")).collect();
    outcome(
        lowest && gbm_auc >= base_auc && forest_auc >= 0.80,
        format!(
            "mean OOD error [{}]; AUROC gbm {gbm_auc:.4} vs baseline {base_auc:.4}; iforest AUROC {forest_auc:.4}",
            summary.join(", ")
        ),
    )
}

fn cross_ood_generalization(runs: &[(u64, BenchmarkOutcome)]) -> Outcome {
    let cfg = BenchmarkConfig::default();
    let shifted: Vec<&str> = cfg
        .evaluation_pools()
        .filter(|(_, p)| p.mode == OodMode::ShiftedCluster)
        .map(|(_, p)| p.tag.as_str())
        .collect();
    let exposure_mode = cfg.exposure_pool().1.mode;
    let mut wins = 0;
    for (_, run) in runs {
        let tag = shifted[0];
        let gbm = run.report.row(Method::GradientBoosting, tag).unwrap().metrics.fpr_at_95_tpr;
        let base = run.report.row(Method::Baseline, tag).unwrap().metrics.fpr_at_95_tpr;
        if gbm <= base {
            wins += 1;
        }
    }
    outcome(
        exposure_mode != OodMode::ShiftedCluster && wins * 2 > runs.len(),
        format!("GBM FPR@95%TPR <= baseline on `{}` in {wins}/{} seeds", shifted[0], runs.len()),
    )
}

fn mean_entropy(model: &SoftmaxClassifier, xs: &[&FeatureVector]) -> f64 {
    xs.iter().map(|x| model.forward(x, 1.0).unwrap().entropy()).sum::<f64>() / xs.len() as f64
}

fn oe_entropy(runs: &[(u64, BenchmarkOutcome)]) -> Outcome {
    let cfg = BenchmarkConfig::default();
    let mut wins = 0;
    let mut margins = Vec::new();
    for (_, run) in runs {
        let held_out: Vec<&FeatureVector> = cfg
            .evaluation_pools()
            .flat_map(|(i, _)| run.data.pools[i].samples.iter())
            .collect();
        let margin = mean_entropy(&run.oe_model, &held_out) - mean_entropy(&run.model, &held_out);
        margins.push(format!("{margin:.3}"));
        if margin > 0.0 {
            wins += 1;
        }
    }
    outcome(
        wins == runs.len(),
        format!("OE minus plain entropy on evaluation pools: [{}]", margins.join(", ")),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_oodkit");
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = std::process::Command::new(bin)
            .args(["benchmark", "--seed", "7", "--out"])
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        reports.push(std::fs::read(out.join("report.csv")).unwrap());
    }
    outcome(
        reports[0] == reports[1] && !reports[0].is_empty(),
        format!("report.csv {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    )
}

fn main() -> ExitCode {
    let runs: Vec<(u64, BenchmarkOutcome)> = (1..=5u64)
        .map(|seed| {
            let cfg = BenchmarkConfig {
                seed,
                ..BenchmarkConfig::default()
            };
            (seed, harness::run_benchmark(&cfg).expect("benchmark runs"))
        })
        .collect();

    let results = [
        ("1 OOD-error identity at the 95% TPR threshold", ood_error_identity()),
        ("2 AUROC oracle equivalence", auroc_oracle()),
        ("3 isolation forest fixed point", iforest_fixed_point()),
        ("4 isolation separation", isolation_separation()),
        ("5 gradient checks", gradient_checks()),
        ("6 GBM stump oracle and monotone loss", gbm_stumps_and_monotone_loss(&runs)),
        ("7 method ordering", method_ordering(&runs)),
        ("8 cross-OOD generalization", cross_ood_generalization(&runs)),
        ("9 OE entropy mechanism", oe_entropy(&runs)),
        ("10 determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        println!("{} criterion {name}: {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
