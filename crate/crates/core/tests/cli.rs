use std::path::Path;
use std::process::{Command, Output};

use oodkit::harness::BenchmarkConfig;

fn oodkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodkit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = oodkit(args, cwd);
    assert!(
        out.status.success(),
        "oodkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn report_line<'a>(report: &'a str, detector: &str, pool: &str) -> &'a str {
    let prefix = format!("{detector},{pool},");
    report.lines().find(|l| l.starts_with(&prefix)).unwrap()
}

/// `ood_error,auroc,fpr_at_95_tpr` of a report.csv line.
fn metric_fields(line: &str) -> String {
    line.split(',').skip(4).collect::<Vec<_>>().join(",")
}

#[test]
fn evaluate_score_fixture_gives_perfect_auroc() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.csv"), "score\n0.9\n0.8\n").unwrap();
    std::fs::write(dir.path().join("out.csv"), "score\n0.1\n0.2\n").unwrap();
    let stdout = ok(&["evaluate", "--in", "in.csv", "--out", "out.csv"], dir.path());
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("detector,ood_set,ood_error,auroc,fpr_at_95_tpr"));
    assert_eq!(lines.next(), Some("scores,ood,0,1,0"));
}

#[test]
fn subcommands_compose_to_the_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["benchmark", "--seed", "4", "--out", "bench"], d);
    ok(&["generate", "--seed", "4", "--out", "data"], d);
    ok(&["train", "--seed", "4", "--train", "data/train.csv", "--validation", "data/validation.csv", "--out", "model.txt"], d);
    assert_eq!(
        std::fs::read(d.join("model.txt")).unwrap(),
        std::fs::read(d.join("bench/model.txt")).unwrap()
    );
    for split in ["validation", "test", "pool_box", "pool_shifted", "pool_exposure-box"] {
        ok(&["predict", "--model", "model.txt", "--input", &format!("data/{split}.csv"), "--out", &format!("{split}_probs.csv")], d);
    }
    ok(&["fit-detector", "--seed", "4", "--kind", "iforest", "--validation", "validation_probs.csv", "--out", "iforest.txt"], d);
    ok(&["fit-detector", "--kind", "baseline", "--validation", "validation_probs.csv", "--out", "baseline.txt"], d);
    ok(&["fit-detector", "--kind", "gbm", "--validation", "validation_probs.csv", "--ood", "pool_exposure-box_probs.csv", "--out", "gbm.txt"], d);
    ok(&["fit-detector", "--kind", "odin", "--model", "model.txt", "--validation", "data/validation.csv", "--out", "odin.txt"], d);

    let report = std::fs::read_to_string(d.join("bench/report.csv")).unwrap();
    for kind in ["iforest", "baseline", "gbm", "odin"] {
        assert_eq!(
            std::fs::read(d.join(format!("{kind}.txt"))).unwrap(),
            std::fs::read(d.join(format!("bench/detector_{kind}.txt"))).unwrap(),
            "{kind} detector differs"
        );
        for pool in ["box", "shifted"] {
            let (ins, outs) = if kind == "odin" {
                ("data/test.csv".to_string(), format!("data/pool_{pool}.csv"))
            } else {
                ("test_probs.csv".to_string(), format!("pool_{pool}_probs.csv"))
            };
            let stdout = ok(
                &["evaluate", "--detector", &format!("{kind}.txt"), "--model", "model.txt", "--in", &ins, "--out", &outs, "--ood-set", pool],
                d,
            );
            let row = stdout.lines().nth(1).unwrap();
            let expected = metric_fields(report_line(&report, kind, pool));
            assert_eq!(row, format!("{kind},{pool},{expected}"));
        }
    }
}

#[test]
fn oe_training_from_the_cli_matches_the_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["benchmark", "--seed", "6", "--out", "bench"], d);
    ok(&["generate", "--seed", "6", "--out", "data"], d);
    ok(
        &["train", "--seed", "6", "--train", "data/train.csv", "--validation", "data/validation.csv",
          "--oe-pool", "data/pool_exposure-box.csv", "--out", "oe.txt"],
        d,
    );
    assert_eq!(
        std::fs::read(d.join("oe.txt")).unwrap(),
        std::fs::read(d.join("bench/model_oe.txt")).unwrap()
    );
}

#[test]
fn different_seeds_give_different_reports() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["benchmark", "--seed", "1", "--out", "a"], dir.path());
    ok(&["benchmark", "--seed", "2", "--out", "b"], dir.path());
    let a = std::fs::read(dir.path().join("a/report.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.csv")).unwrap();
    assert_ne!(a, b);
    for f in ["model.txt", "model_oe.txt", "report.txt", "detector_outlier-exposure.txt", "detector_gbm.txt"] {
        assert!(dir.path().join("a").join(f).is_file(), "missing {f}");
    }
}

#[test]
fn usage_errors_and_missing_files_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["evaluate", "--in", "missing.csv", "--out", "missing.csv"],
        vec!["benchmark", "--out", "x", "--no-such-flag"],
        vec!["frobnicate"],
        vec!["fit-detector", "--kind", "svm", "--validation", "v.csv", "--out", "d.txt"],
    ] {
        let out = oodkit(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.lines().count(), 1, "{stderr}");
        assert!(stderr.starts_with("oodkit: error: "), "{stderr}");
    }
}

#[test]
fn invalid_input_exits_with_1_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.csv"), "score\n0.9\nabc\n").unwrap();
    std::fs::write(dir.path().join("out.csv"), "score\n0.1\n").unwrap();
    let out = oodkit(&["evaluate", "--in", "in.csv", "--out", "out.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("oodkit: error: parse: "), "{stderr}");
    assert!(stderr.contains("line 3"), "{stderr}");
}

#[test]
fn exposure_pool_cannot_be_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = BenchmarkConfig::default();
    cfg.pools[1].tag = cfg.pools[0].tag.clone();
    std::fs::write(dir.path().join("bad.toml"), cfg.to_toml()).unwrap();
    let out = oodkit(&["benchmark", "--config", "bad.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("oodkit: error: config: "));
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("config/default.toml");
    assert_eq!(BenchmarkConfig::load(path).unwrap(), BenchmarkConfig::default());
}

#[test]
fn odin_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["benchmark", "--seed", "1", "--odin-temperature", "1", "--odin-epsilon", "0", "--out", "o"], dir.path());
    let odin = std::fs::read_to_string(dir.path().join("o/detector_odin.txt")).unwrap();
    let baseline = std::fs::read_to_string(dir.path().join("o/detector_baseline.txt")).unwrap();
    let threshold = |text: &str| text.split_whitespace().nth(4).unwrap().to_string();
    assert_eq!(threshold(&odin), threshold(&baseline));
}
