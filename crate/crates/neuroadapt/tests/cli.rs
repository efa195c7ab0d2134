use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn neuroadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroadapt"))
        .args(args)
        .env("NEUROADAPT_THREADS", "2")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{"num_classes": 2, "channels": 4, "n_source": 200, "n_target": 64, "target_priors": [0.8, 0.2]}"#;

#[test]
fn generate_adapt_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let suite_dir = dir.path().join("suite");
    let out = neuroadapt(&[
        "generate",
        "--suite",
        "label_shift",
        "--spec",
        s(&spec),
        "--seed",
        "3",
        "--out",
        s(&suite_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["source.json", "source.nadb", "target.json", "target.nadb"] {
        assert!(suite_dir.join(f).exists(), "{f}");
    }

    let config = dir.path().join("plan.json");
    fs::write(
        &config,
        r#"{
            "suites": [{"name": "ls", "path": "suite"}],
            "methods": [{"method": "t3a"}, {"method": "tent"}],
            "batch_sizes": [32],
            "seeds": [0, 1],
            "finetune": {"epochs": 2},
            "output_dir": "runs"
        }"#,
    )
    .unwrap();
    let out = neuroadapt(&["finetune", "--config", s(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let out = neuroadapt(&["adapt", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = dir.path().join("runs").join("runs.jsonl");
    assert_eq!(fs::read_to_string(&runs).unwrap().lines().count(), 6);

    let out = neuroadapt(&["adapt", "--config", s(&config), "--resume"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 computed"));

    let report = dir.path().join("report");
    let out = neuroadapt(&["report", "--runs", s(&runs), "--out", s(&report), "--by-batch-size"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(report.join("deltas.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn validation_errors_exit_1_with_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plan.json");
    fs::write(
        &config,
        r#"{"suites": [], "methods": [{"method": "t3a", "t3a": {"filterk": 3}}]}"#,
    )
    .unwrap();
    let out = neuroadapt(&["adapt", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("methods[0].t3a"), "{err}");

    fs::write(&config, r#"{"suites": [{"name": "x", "path": "x"}], "methods": []}"#).unwrap();
    assert_eq!(neuroadapt(&["adapt", "--config", s(&config)]).status.code(), Some(1));
}

#[test]
fn partial_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plan.json");
    fs::write(
        &config,
        r#"{
            "suites": [{"name": "gone", "path": "nowhere"}],
            "methods": [{"method": "t3a"}],
            "batch_sizes": [32],
            "seeds": [0],
            "output_dir": "runs"
        }"#,
    )
    .unwrap();
    let out = neuroadapt(&["adapt", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_rejects_a_contradicting_kind() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC.replacen('{', r#"{"kind": "covariate_shift", "#, 1)).unwrap();
    let out = neuroadapt(&[
        "generate",
        "--suite",
        "label_shift",
        "--spec",
        s(&spec),
        "--seed",
        "0",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_example_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.json");
    let plan = neuroadapt::plan::load_config(&path).unwrap();
    // 2 suites x 2 encoders x 5 methods (with no_tta) x 3 batch sizes x 5 seeds
    assert_eq!(plan.cardinality(), 300);
}
