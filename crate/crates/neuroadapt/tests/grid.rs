use std::fs;
use std::path::Path;

use neuroadapt::core::finetune::FinetuneConfig;
use neuroadapt::core::metrics::MetricReport;
use neuroadapt::core::model::EncoderKind;
use neuroadapt::core::shiftbench::SuiteSpec;
use neuroadapt::core::tta::{AdapterConfig, Method};
use neuroadapt::plan::{ExperimentPlan, SuiteEntry};
use neuroadapt::report::{build_report, report, write_report, Aggregation};
use neuroadapt::runner::{expected_keys, read_runs, run_experiment, RunRecord, RUNS_FILE};
use neuroadapt::HarnessError;

fn tiny_plan(out: &Path, methods: Vec<AdapterConfig>) -> ExperimentPlan {
    ExperimentPlan {
        suites: vec![
            SuiteEntry {
                name: "null".into(),
                spec: Some(SuiteSpec::null(2, 4, 200, 64)),
                path: None,
            },
            SuiteEntry {
                name: "subject".into(),
                spec: Some(SuiteSpec {
                    subject_std: 0.5,
                    ..SuiteSpec::null(2, 4, 200, 64)
                }),
                path: None,
            },
        ],
        encoders: vec![EncoderKind::Identity],
        methods,
        batch_sizes: vec![16, 32, 64],
        seeds: (0..5).collect(),
        finetune: FinetuneConfig {
            epochs: 2,
            ..FinetuneConfig::default()
        },
        output_dir: out.to_path_buf(),
        plan_seed: 7,
        trace: false,
    }
}

fn all_methods() -> Vec<AdapterConfig> {
    Method::ALL.iter().map(|&m| AdapterConfig::new(m)).collect()
}

fn without_wall_time(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_ms");
            v
        })
        .collect()
}

#[test]
fn grid_has_one_record_per_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), all_methods());
    let summary = run_experiment(&plan, false).unwrap();
    // 2 suites x 1 encoder x 4 methods x 3 batch sizes x 5 seeds
    assert_eq!(plan.cardinality(), 120);
    assert_eq!(summary.records.len(), 120);
    assert_eq!(summary.failed, 0);
    let keys: std::collections::BTreeSet<_> = summary.records.iter().map(RunRecord::key).collect();
    assert_eq!(keys, expected_keys(&plan));
    for r in summary.records.iter().filter(|r| r.method_kind != Method::NoTta) {
        let base = summary
            .records
            .iter()
            .find(|b| {
                b.key()
                    == neuroadapt::runner::RunKey {
                        method: "no_tta".into(),
                        ..r.key()
                    }
            })
            .unwrap();
        assert_eq!(r.checkpoint_hash, base.checkpoint_hash);
        assert_eq!(r.n_target, base.n_target);
    }
}

#[test]
fn resume_recomputes_only_missing_records() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), all_methods());
    let first = run_experiment(&plan, false).unwrap();
    let original = without_wall_time(&first.path);

    let again = run_experiment(&plan, true).unwrap();
    assert_eq!(again.computed, 0);
    assert_eq!(without_wall_time(&again.path), original);

    // lose the last 10 records and leave a torn line behind
    let text = fs::read_to_string(&first.path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut damaged = lines[..lines.len() - 10].join("\n");
    damaged.push_str("\n{\"suite\": \"nul");
    fs::write(&first.path, damaged).unwrap();
    let resumed = run_experiment(&plan, true).unwrap();
    assert_eq!(resumed.computed, 10);
    assert_eq!(without_wall_time(&resumed.path), original);
}

#[test]
fn fresh_run_discards_old_records() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), all_methods());
    fs::write(dir.path().join(RUNS_FILE), "garbage\n").unwrap();
    let summary = run_experiment(&plan, false).unwrap();
    assert_eq!(summary.computed, 120);
}

#[test]
fn report_refuses_orphans() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), vec![AdapterConfig::new(Method::T3a)]);
    let mut records = run_experiment(&plan, false).unwrap().records;
    let gone = records.iter().position(|r| r.method_kind == Method::NoTta).unwrap();
    let removed = records.remove(gone);
    match build_report(&records, false, Aggregation::Pooled).unwrap_err() {
        HarnessError::Orphans(list) => {
            assert_eq!(list.len(), 1);
            assert!(
                list[0].contains(&removed.suite) && list[0].contains("no baseline"),
                "{list:?}"
            );
        }
        other => panic!("unexpected {other}"),
    }

    // a partner trained from another checkpoint does not count either
    let mut records = run_experiment(&plan, false).unwrap().records;
    let t3a = records.iter_mut().find(|r| r.method_kind == Method::T3a).unwrap();
    t3a.checkpoint_hash = Some("ff".repeat(32));
    assert!(matches!(
        build_report(&records, false, Aggregation::Pooled),
        Err(HarnessError::Orphans(_))
    ));
}

#[test]
fn frozen_tent_gives_an_all_zero_delta_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut frozen = AdapterConfig::new(Method::Tent);
    frozen.label = Some("tent_lr0".into());
    frozen.tent.lr = 0.0;
    let plan = tiny_plan(dir.path(), vec![frozen]);
    let summary = run_experiment(&plan, false).unwrap();
    let out = dir.path().join("report");
    report(&summary.path, &out, true, Aggregation::Pooled).unwrap();
    let csv = fs::read_to_string(out.join("deltas.csv")).unwrap();
    let mut rows = csv.lines();
    let header = rows.next().unwrap();
    assert!(header.starts_with("suite,encoder,method,n,n_failed,"), "{header}");
    let body: Vec<&str> = rows.collect();
    assert_eq!(body.len(), 2, "{csv}");
    for row in body {
        assert!(row.contains("tent_lr0"));
        for cell in row.split(',').skip(5) {
            assert_eq!(cell, "+0.000 ± 0.000", "{row}");
        }
    }
    assert!(out.join("deltas_by_batch_size.csv").exists());
    assert!(out.join("summary.json").exists());
}

fn fixture_record(method: Method, label: &str, seed: u64, bacc: f64, template: &RunRecord) -> RunRecord {
    let mut r = template.clone();
    r.method = label.into();
    r.method_kind = method;
    r.seed = seed;
    r.metrics = Some(MetricReport {
        balanced_accuracy: bacc,
        ..template.metrics.unwrap()
    });
    r
}

#[test]
fn three_cell_mean_and_sample_std() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(dir.path(), vec![AdapterConfig::new(Method::T3a)]);
    plan.suites.truncate(1);
    plan.seeds = vec![0];
    plan.batch_sizes = vec![16];
    let template = run_experiment(&plan, false).unwrap().records[0].clone();
    // deltas 0.1, 0.2, 0.3 -> mean 0.2, sample std 0.1
    let mut records = Vec::new();
    for (seed, d) in [(0u64, 0.1), (1, 0.2), (2, 0.3)] {
        records.push(fixture_record(Method::NoTta, "no_tta", seed, 0.5, &template));
        records.push(fixture_record(Method::T3a, "t3a", seed, 0.5 + d, &template));
    }
    let summary = build_report(&records, false, Aggregation::Pooled).unwrap();
    let row = summary.pooled.iter().find(|r| r.method == "t3a").unwrap();
    let a = row.delta["balanced_accuracy"];
    assert_eq!(a.n, 3);
    assert!((a.mean - 0.2).abs() < 1e-12, "{}", a.mean);
    assert!((a.std - 0.1).abs() < 1e-12, "{}", a.std);
    let out = dir.path().join("fixture");
    write_report(&summary, &out).unwrap();
    let csv = fs::read_to_string(out.join("deltas.csv")).unwrap();
    assert!(csv.contains("+0.200 ± 0.100"), "{csv}");
}

#[test]
fn failed_runs_are_recorded_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(dir.path(), vec![AdapterConfig::new(Method::T3a)]);
    plan.suites[1] = SuiteEntry {
        name: "missing".into(),
        spec: None,
        path: Some(dir.path().join("no_such_suite")),
    };
    plan.batch_sizes = vec![16];
    let summary = run_experiment(&plan, false).unwrap();
    // the healthy suite still runs; every record of the missing one fails
    assert_eq!(summary.records.len(), 20);
    assert_eq!(summary.failed, 10);
    let failed: Vec<_> = read_runs(&summary.path)
        .unwrap()
        .into_iter()
        .filter(|r| !r.is_ok())
        .collect();
    assert!(failed.iter().all(|r| r.suite == "missing" && r.metrics.is_none()));
    assert!(
        failed[0].error.as_deref().unwrap().contains("no_such_suite"),
        "{:?}",
        failed[0].error
    );
    let out = dir.path().join("report");
    let s = report(&summary.path, &out, false, Aggregation::Pooled).unwrap();
    assert_eq!(s.failed, 10);
    let csv = fs::read_to_string(out.join("deltas.csv")).unwrap();
    assert!(
        csv.lines().any(|l| l.starts_with("missing,identity,t3a,0,5,NA")),
        "{csv}"
    );
}

#[test]
fn seed_means_average_batch_sizes_first() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(dir.path(), vec![AdapterConfig::new(Method::T3a)]);
    plan.suites.truncate(1);
    plan.seeds = vec![0];
    plan.batch_sizes = vec![16];
    let template = run_experiment(&plan, false).unwrap().records[0].clone();
    // seed 0: deltas 0.1 and 0.3 over two batch sizes; seed 1: 0.4 at one
    let mut records = Vec::new();
    for (seed, bs, d) in [(0u64, 16usize, 0.1), (0, 32, 0.3), (1, 16, 0.4)] {
        for (m, label, v) in [(Method::NoTta, "no_tta", 0.5), (Method::T3a, "t3a", 0.5 + d)] {
            let mut r = fixture_record(m, label, seed, v, &template);
            r.batch_size = bs;
            records.push(r);
        }
    }
    let get = |how| {
        let s = build_report(&records, false, how).unwrap();
        s.pooled.iter().find(|r| r.method == "t3a").unwrap().delta["balanced_accuracy"]
    };
    let pooled = get(Aggregation::Pooled);
    assert_eq!(pooled.n, 3);
    assert!((pooled.mean - 0.8 / 3.0).abs() < 1e-12);
    // seed means 0.2 and 0.4
    let by_seed = get(Aggregation::SeedMeans);
    assert_eq!(by_seed.n, 2);
    assert!((by_seed.mean - 0.3).abs() < 1e-12);
    assert!((by_seed.std - 0.02f64.sqrt()).abs() < 1e-12);
}
