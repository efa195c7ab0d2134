//! Δ tables: every TTA record is paired with the No-TTA record of the same
//! (suite, encoder, seed, batch size) and checkpoint, and the per-pair
//! differences are pooled over seeds and batch sizes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neuroadapt_core::metrics::{aggregate, delta, Aggregate, MetricReport};
use neuroadapt_core::tta::Method;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::runner::{read_runs, RunKey, RunRecord};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub suite: String,
    pub encoder: String,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Successful runs contributing to `absolute`.
    pub n_ok: usize,
    pub n_failed: usize,
    /// Empty for the baseline itself.
    pub delta: BTreeMap<String, Aggregate>,
    pub absolute: BTreeMap<String, Aggregate>,
}

/// How cells are pooled into mean ± std.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every (seed, batch size) cell counts once.
    #[default]
    Pooled,
    /// Average over batch sizes within each seed first; std is across seeds.
    SeedMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub aggregation: Aggregation,
    pub records: usize,
    pub failed: usize,
    pub pooled: Vec<ReportRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_batch_size: Option<Vec<ReportRow>>,
}

fn partner_key(r: &RunRecord) -> RunKey {
    RunKey {
        method: Method::NoTta.name().into(),
        ..r.key()
    }
}

#[derive(Default)]
struct Acc {
    ok: usize,
    failed: usize,
    /// Metric name -> (seed, value) per contributing cell.
    delta: BTreeMap<&'static str, Vec<(u64, f64)>>,
    absolute: BTreeMap<&'static str, Vec<(u64, f64)>>,
}

fn push_metrics(into: &mut BTreeMap<&'static str, Vec<(u64, f64)>>, seed: u64, m: &MetricReport) {
    for name in MetricReport::NAMES {
        if let Some(v) = m.get(name) {
            into.entry(name).or_default().push((seed, v));
        }
    }
}

fn pool(cells: &[(u64, f64)], how: Aggregation) -> Result<Aggregate> {
    match how {
        Aggregation::Pooled => Ok(aggregate(&cells.iter().map(|&(_, v)| v).collect::<Vec<_>>())?),
        Aggregation::SeedMeans => {
            let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for &(seed, v) in cells {
                per_seed.entry(seed).or_default().push(v);
            }
            let means = per_seed
                .values()
                .map(|v| aggregate(v).map(|a| a.mean))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(aggregate(&means)?)
        }
    }
}

fn finish(map: BTreeMap<&'static str, Vec<(u64, f64)>>, how: Aggregation) -> Result<BTreeMap<String, Aggregate>> {
    map.into_iter()
        .map(|(k, v)| Ok((k.to_string(), pool(&v, how)?)))
        .collect()
}

fn rows(records: &[RunRecord], by_batch_size: bool, how: Aggregation) -> Result<Vec<ReportRow>> {
    let index: BTreeMap<RunKey, &RunRecord> = records.iter().map(|r| (r.key(), r)).collect();
    let mut order: Vec<(String, String, String, Option<usize>)> = Vec::new();
    let mut accs: BTreeMap<(String, String, String, Option<usize>), Acc> = BTreeMap::new();
    for r in records {
        let group = (
            r.suite.clone(),
            r.encoder.clone(),
            r.method.clone(),
            by_batch_size.then_some(r.batch_size),
        );
        if !accs.contains_key(&group) {
            order.push(group.clone());
        }
        let acc = accs.entry(group).or_default();
        let Some(m) = r.metrics.as_ref().filter(|_| r.is_ok()) else {
            acc.failed += 1;
            continue;
        };
        acc.ok += 1;
        push_metrics(&mut acc.absolute, r.seed, m);
        if r.method_kind == Method::NoTta {
            continue;
        }
        let base = index[&partner_key(r)];
        if let Some(bm) = base.metrics.as_ref().filter(|_| base.is_ok()) {
            for name in MetricReport::NAMES {
                if let (Some(a), Some(b)) = (m.get(name), bm.get(name)) {
                    acc.delta.entry(name).or_default().push((r.seed, delta(a, b)));
                }
            }
        }
    }
    order
        .into_iter()
        .map(|g| {
            let acc = accs.remove(&g).expect("group recorded");
            let (suite, encoder, method, batch_size) = g;
            Ok(ReportRow {
                suite,
                encoder,
                method,
                batch_size,
                n_ok: acc.ok,
                n_failed: acc.failed,
                delta: finish(acc.delta, how)?,
                absolute: finish(acc.absolute, how)?,
            })
        })
        .collect()
}

/// Every TTA record must have a No-TTA partner sharing its checkpoint.
pub fn check_matched(records: &[RunRecord]) -> Result<()> {
    let index: BTreeMap<RunKey, &RunRecord> = records.iter().map(|r| (r.key(), r)).collect();
    let mut orphans = Vec::new();
    for r in records.iter().filter(|r| r.method_kind != Method::NoTta) {
        match index.get(&partner_key(r)) {
            None => orphans.push(format!("{} (no baseline)", r.key())),
            Some(b) => {
                if let (Some(x), Some(y)) = (&r.checkpoint_hash, &b.checkpoint_hash) {
                    if x != y {
                        orphans.push(format!("{} (checkpoint differs from baseline)", r.key()));
                    }
                }
            }
        }
    }
    if orphans.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Orphans(orphans))
    }
}

pub fn build_report(records: &[RunRecord], by_batch_size: bool, how: Aggregation) -> Result<ReportSummary> {
    check_matched(records)?;
    Ok(ReportSummary {
        aggregation: how,
        records: records.len(),
        failed: records.iter().filter(|r| !r.is_ok()).count(),
        pooled: rows(records, false, how)?,
        by_batch_size: if by_batch_size {
            Some(rows(records, true, how)?)
        } else {
            None
        },
    })
}

/// `+0.187 ± 0.035`
pub fn format_delta(a: &Aggregate) -> String {
    format!("{:+.3} ± {:.3}", a.mean, a.std)
}

pub fn format_absolute(a: &Aggregate) -> String {
    format!("{:.3} ± {:.3}", a.mean, a.std)
}

fn table(rows: &[ReportRow], absolute: bool) -> Vec<u8> {
    let stratified = rows.iter().any(|r| r.batch_size.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["suite", "encoder", "method"];
    if stratified {
        header.push("batch_size");
    }
    header.extend(["n", "n_failed"]);
    header.extend(MetricReport::NAMES);
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let cells = if absolute { &r.absolute } else { &r.delta };
        if !absolute && r.method == Method::NoTta.name() {
            continue;
        }
        let n = cells.get("balanced_accuracy").map_or(0, |a| a.n);
        let mut line = vec![r.suite.clone(), r.encoder.clone(), r.method.clone()];
        if stratified {
            line.push(r.batch_size.map(|b| b.to_string()).unwrap_or_default());
        }
        line.push(n.to_string());
        line.push(r.n_failed.to_string());
        for name in MetricReport::NAMES {
            line.push(cells.get(name).map_or_else(
                || "NA".into(),
                |a| {
                    if absolute {
                        format_absolute(a)
                    } else {
                        format_delta(a)
                    }
                },
            ));
        }
        w.write_record(&line).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Write `deltas.csv`, `absolute.csv`, optional per-batch-size variants and
/// `summary.json` into `out`.
pub fn write_report(summary: &ReportSummary, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    emit("deltas.csv", table(&summary.pooled, false))?;
    emit("absolute.csv", table(&summary.pooled, true))?;
    if let Some(rows) = &summary.by_batch_size {
        emit("deltas_by_batch_size.csv", table(rows, false))?;
        emit("absolute_by_batch_size.csv", table(rows, true))?;
    }
    let p = out.join("summary.json");
    write_json(&p, summary)?;
    written.push(p);
    Ok(written)
}

pub fn report(runs: &Path, out: &Path, by_batch_size: bool, how: Aggregation) -> Result<ReportSummary> {
    let records = read_runs(runs)?;
    let summary = build_report(&records, by_batch_size, how)?;
    write_report(&summary, out)?;
    Ok(summary)
}
