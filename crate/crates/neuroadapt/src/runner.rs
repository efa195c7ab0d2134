//! The experiment grid: for every (suite, encoder, seed) cell, fine-tune a
//! head once, then run every (batch size, method) pair on the unlabeled
//! target stream and score it. Records go to `<output_dir>/runs.jsonl`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use neuroadapt_core::finetune::{finetune_dataset, FinetuneConfig};
use neuroadapt_core::hash::to_hex;
use neuroadapt_core::metrics::{evaluate, MetricReport, PredictionSet};
use neuroadapt_core::model::{Checkpoint, Encoder, EncoderSpec, BLOCK_NAMES};
use neuroadapt_core::numerics::{Matrix, RNG_ALGORITHM};
use neuroadapt_core::shiftbench::{generate_suite, Dataset, Split, SuiteData, UnlabeledBatch};
use neuroadapt_core::tta::{run_adaptation, AdapterConfig, BatchDiagnostics, Method};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckpt::{read_checkpoint, write_checkpoint, CheckpointSidecar};
use crate::error::{HarnessError, Result};
use crate::fsutil::write_atomic;
use crate::nadb::load_dataset;
use crate::plan::{data_seed, finetune_seed, ExperimentPlan, SuiteEntry};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUNS_FILE: &str = "runs.jsonl";
pub const THREADS_ENV: &str = "NEUROADAPT_THREADS";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub suite: String,
    pub encoder: String,
    pub seed: u64,
    pub batch_size: usize,
    pub method: String,
}

impl std::fmt::Display for RunKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "suite={} encoder={} seed={} batch_size={} method={}",
            self.suite, self.encoder, self.seed, self.batch_size, self.method
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// With the spec's seed set to the derived data seed.
    pub suite: SuiteEntry,
    pub encoder: EncoderSpec,
    /// With the derived fine-tuning seed.
    pub finetune: FinetuneConfig,
    pub adapter: AdapterConfig,
    pub plan_seed: u64,
    pub rng: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub suite: String,
    pub encoder: String,
    pub seed: u64,
    pub batch_size: usize,
    pub method: String,
    pub method_kind: Method,
    pub status: RunStatus,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
    pub checkpoint_hash: Option<String>,
    /// Encoder parameter hash taken after adaptation finished.
    pub encoder_hash: Option<String>,
    /// Per-block hashes of the head the method ended with.
    pub head_blocks: Option<BTreeMap<String, String>>,
    /// Mean predicted probability per class over the target set.
    pub prob_marginal: Option<Vec<f64>>,
    /// Fraction of target records predicted as each class.
    pub label_marginal: Option<Vec<f64>>,
    pub n_target: usize,
    pub wall_time_ms: u64,
    pub library_version: String,
    pub config: RunConfig,
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey {
            suite: self.suite.clone(),
            encoder: self.encoder.clone(),
            seed: self.seed,
            batch_size: self.batch_size,
            method: self.method.clone(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// Appends whole lines under a lock so concurrent cells never interleave.
struct RecordSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl RecordSink {
    fn append(&self, record: &RunRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line)
            .and_then(|_| f.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Parse a runs file. A trailing line cut short by a crash is dropped;
/// corruption anywhere else is an error.
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(HarnessError::format(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

fn write_runs(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).expect("records serialize");
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    suite: usize,
    encoder: usize,
    seed: u64,
}

struct CellInputs {
    source: Dataset,
    target: Dataset,
    encoder: Encoder,
    suite: SuiteEntry,
    finetune: FinetuneConfig,
}

fn load_suite(plan: &ExperimentPlan, cell: Cell) -> Result<(SuiteEntry, SuiteData)> {
    let entry = &plan.suites[cell.suite];
    match (&entry.spec, &entry.path) {
        (Some(spec), _) => {
            let mut spec = spec.clone();
            spec.seed = data_seed(plan.plan_seed, &entry.name, cell.seed);
            let data = generate_suite(&spec)?;
            Ok((
                SuiteEntry {
                    spec: Some(spec),
                    ..entry.clone()
                },
                data,
            ))
        }
        (None, Some(dir)) => {
            let source = load_dataset(&dir.join("source.json"))?;
            let target = load_dataset(&dir.join("target.json"))?;
            Ok((entry.clone(), SuiteData { source, target }))
        }
        (None, None) => Err(HarnessError::Validation(format!("suite {:?} has no data", entry.name))),
    }
}

fn cell_inputs(plan: &ExperimentPlan, cell: Cell) -> Result<CellInputs> {
    let (suite, data) = load_suite(plan, cell)?;
    let m = &data.source.manifest;
    if (m.channels, m.samples, m.task)
        != (
            data.target.manifest.channels,
            data.target.manifest.samples,
            data.target.manifest.task,
        )
    {
        return Err(HarnessError::Validation(format!(
            "suite {:?}: source and target disagree on shape or task",
            suite.name
        )));
    }
    let kind = plan.encoders[cell.encoder].clone();
    let encoder = Encoder::new(EncoderSpec::new(kind.clone(), m.channels, m.samples))?;
    let finetune = FinetuneConfig {
        seed: finetune_seed(plan.plan_seed, &suite.name, &kind.label(), cell.seed),
        ..plan.finetune.clone()
    };
    Ok(CellInputs {
        source: data.source,
        target: data.target,
        encoder,
        suite,
        finetune,
    })
}

pub fn checkpoint_path(plan: &ExperimentPlan, suite: &str, encoder: &str, seed: u64) -> PathBuf {
    plan.output_dir
        .join("checkpoints")
        .join(format!("{suite}__{encoder}__s{seed}.nack"))
}

/// Reuse a checkpoint on disk when its sidecar matches this cell exactly;
/// otherwise fine-tune and write one.
fn obtain_checkpoint(path: &Path, inputs: &CellInputs) -> Result<Checkpoint> {
    if path.exists() {
        if let Ok((ck, side)) = read_checkpoint(path) {
            if side.finetune == inputs.finetune && &side.encoder == inputs.encoder.spec() {
                return Ok(ck);
            }
        }
    }
    let (ck, log) = finetune_dataset(&inputs.finetune, &inputs.source, &inputs.encoder)?;
    let sidecar = CheckpointSidecar {
        fingerprint: to_hex(&ck.fingerprint()),
        encoder: inputs.encoder.spec().clone(),
        encoder_fingerprint: to_hex(&ck.encoder),
        finetune: inputs.finetune.clone(),
        training: log,
        library_version: LIBRARY_VERSION.into(),
    };
    write_checkpoint(path, &ck, &sidecar)?;
    Ok(ck)
}

fn marginals(probs: &Matrix<f32>) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = probs.shape();
    let mut mean = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for r in 0..n {
        for (m, &p) in mean.iter_mut().zip(probs.row(r)) {
            *m += f64::from(p);
        }
    }
    for y in probs.argmax_rows() {
        counts[y] += 1;
    }
    let n = n.max(1) as f64;
    (
        mean.into_iter().map(|m| m / n).collect(),
        counts.into_iter().map(|c| c as f64 / n).collect(),
    )
}

struct RunContext<'a> {
    plan: &'a ExperimentPlan,
    cell: Cell,
    done: &'a BTreeSet<RunKey>,
    sink: &'a RecordSink,
}

impl RunContext<'_> {
    fn key(&self, batch_size: usize, method: &AdapterConfig) -> RunKey {
        RunKey {
            suite: self.plan.suites[self.cell.suite].name.clone(),
            encoder: self.plan.encoders[self.cell.encoder].label(),
            seed: self.cell.seed,
            batch_size,
            method: method.label(),
        }
    }

    fn pending(&self) -> Vec<(usize, AdapterConfig)> {
        let mut out = Vec::new();
        for &bs in &self.plan.batch_sizes {
            for m in self.plan.adapter_configs() {
                if !self.done.contains(&self.key(bs, &m)) {
                    out.push((bs, m));
                }
            }
        }
        out
    }

    fn base_record(&self, bs: usize, m: &AdapterConfig, config: RunConfig) -> RunRecord {
        let key = self.key(bs, m);
        RunRecord {
            suite: key.suite,
            encoder: key.encoder,
            seed: key.seed,
            batch_size: bs,
            method: key.method,
            method_kind: m.method,
            status: RunStatus::Failed,
            metrics: None,
            error: None,
            checkpoint_hash: None,
            encoder_hash: None,
            head_blocks: None,
            prob_marginal: None,
            label_marginal: None,
            n_target: 0,
            wall_time_ms: 0,
            library_version: LIBRARY_VERSION.into(),
            config,
        }
    }

    /// Fallback config for records of a cell whose inputs failed to build.
    fn unresolved_config(&self, m: &AdapterConfig) -> RunConfig {
        RunConfig {
            suite: self.plan.suites[self.cell.suite].clone(),
            encoder: EncoderSpec::new(self.plan.encoders[self.cell.encoder].clone(), 0, 0),
            finetune: self.plan.finetune.clone(),
            adapter: m.clone(),
            plan_seed: self.plan.plan_seed,
            rng: RNG_ALGORITHM.into(),
        }
    }

    /// Returns the number of failed records written.
    fn run(&self) -> Result<usize> {
        let pending = self.pending();
        if pending.is_empty() {
            return Ok(0);
        }
        let prepared = cell_inputs(self.plan, self.cell).and_then(|inputs| {
            let path = checkpoint_path(
                self.plan,
                &inputs.suite.name,
                &inputs.encoder.spec().kind.label(),
                self.cell.seed,
            );
            let ck = obtain_checkpoint(&path, &inputs)?;
            Ok((inputs, ck))
        });
        let (inputs, ck) = match prepared {
            Ok(v) => v,
            Err(e) => {
                for (bs, m) in &pending {
                    let mut r = self.base_record(*bs, m, self.unresolved_config(m));
                    r.error = Some(format!("cell setup failed: {e}"));
                    self.sink.append(&r)?;
                }
                return Ok(pending.len());
            }
        };
        let test = inputs.target.subset(Split::Test);
        let all: Vec<usize> = (0..test.len()).collect();
        let batch = test.batch(&all);
        let labels = batch.labels.clone();
        let stream: UnlabeledBatch = batch.strip_labels();
        let task = test.manifest.task;
        let ck_hash = to_hex(&ck.fingerprint());

        let mut failed = 0;
        for (bs, m) in pending {
            let config = RunConfig {
                suite: inputs.suite.clone(),
                encoder: inputs.encoder.spec().clone(),
                finetune: inputs.finetune.clone(),
                adapter: m.clone(),
                plan_seed: self.plan.plan_seed,
                rng: RNG_ALGORITHM.into(),
            };
            let mut record = self.base_record(bs, &m, config);
            record.checkpoint_hash = Some(ck_hash.clone());
            record.n_target = stream.len();
            let start = Instant::now();
            let mut trace_buf = Vec::new();
            let mut sink = |d: &BatchDiagnostics| {
                serde_json::to_writer(&mut trace_buf, d).expect("diagnostics serialize");
                trace_buf.push(b'\n');
            };
            let trace: Option<&mut dyn FnMut(&BatchDiagnostics)> = if self.plan.trace { Some(&mut sink) } else { None };
            let outcome = run_adaptation(&m, &ck, &inputs.encoder, &stream, bs, trace)
                .map_err(HarnessError::from)
                .and_then(|out| {
                    let labels = labels
                        .clone()
                        .ok_or_else(|| HarnessError::Validation("target split has no labels to score".into()))?;
                    let metrics = evaluate(task, &PredictionSet::new(labels, out.probs.clone())?)?;
                    Ok((out, metrics))
                });
            record.wall_time_ms = start.elapsed().as_millis() as u64;
            record.encoder_hash = Some(to_hex(&inputs.encoder.param_fingerprint()));
            match outcome {
                Ok((out, metrics)) => {
                    let blocks = out.state.head().block_fingerprints();
                    record.head_blocks = Some(
                        BLOCK_NAMES
                            .iter()
                            .zip(blocks)
                            .map(|(n, h)| (n.to_string(), to_hex(&h)))
                            .collect(),
                    );
                    let (pm, lm) = marginals(&out.probs);
                    record.prob_marginal = Some(pm);
                    record.label_marginal = Some(lm);
                    record.metrics = Some(metrics);
                    record.status = RunStatus::Ok;
                }
                Err(e) => {
                    record.error = Some(e.to_string());
                    failed += 1;
                }
            }
            if self.plan.trace {
                let name = format!(
                    "{}__{}__s{}__b{}__{}.jsonl",
                    record.suite, record.encoder, record.seed, bs, record.method
                );
                write_atomic(&self.plan.output_dir.join("traces").join(name), &trace_buf)?;
            }
            self.sink.append(&record)?;
        }
        Ok(failed)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub path: PathBuf,
    pub records: Vec<RunRecord>,
    /// Records produced by this invocation (0 for a fully resumed plan).
    pub computed: usize,
    pub failed: usize,
}

fn canonical_order(plan: &ExperimentPlan, records: &mut [RunRecord]) {
    let pos = |items: &[String], x: &str| items.iter().position(|s| s == x).unwrap_or(usize::MAX);
    let suites: Vec<String> = plan.suites.iter().map(|s| s.name.clone()).collect();
    let encoders: Vec<String> = plan.encoders.iter().map(|e| e.label()).collect();
    let methods: Vec<String> = plan.adapter_configs().iter().map(AdapterConfig::label).collect();
    records.sort_by_cached_key(|r| {
        (
            pos(&suites, &r.suite),
            pos(&encoders, &r.encoder),
            plan.seeds.iter().position(|&s| s == r.seed),
            plan.batch_sizes.iter().position(|&b| b == r.batch_size),
            pos(&methods, &r.method),
        )
    });
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize =
            v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                HarnessError::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
            })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| HarnessError::Validation(format!("thread pool: {e}")))
}

/// Run the whole grid. With `resume`, records already in the runs file are
/// kept and their coordinates skipped; without it the file starts empty.
pub fn run_experiment(plan: &ExperimentPlan, resume: bool) -> Result<RunSummary> {
    plan.validate()?;
    fs::create_dir_all(&plan.output_dir).map_err(|e| HarnessError::io(&plan.output_dir, e))?;
    let path = plan.output_dir.join(RUNS_FILE);
    let mut kept = Vec::new();
    if resume && path.exists() {
        let valid: BTreeSet<RunKey> = expected_keys(plan);
        kept = read_runs(&path)?
            .into_iter()
            .filter(|r| valid.contains(&r.key()))
            .collect();
    }
    // rewrite so a torn trailing line from a crash is gone before appending
    write_runs(&path, &kept)?;
    let done: BTreeSet<RunKey> = kept.iter().map(RunRecord::key).collect();
    let file = OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| HarnessError::io(&path, e))?;
    let sink = RecordSink {
        path: path.clone(),
        file: Mutex::new(file),
    };

    let mut cells = Vec::new();
    for suite in 0..plan.suites.len() {
        for encoder in 0..plan.encoders.len() {
            for &seed in &plan.seeds {
                cells.push(Cell { suite, encoder, seed });
            }
        }
    }
    let pool = thread_pool()?;
    let results: Vec<Result<usize>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                RunContext {
                    plan,
                    cell,
                    done: &done,
                    sink: &sink,
                }
                .run()
            })
            .collect()
    });
    for r in results {
        r?;
    }
    drop(sink);

    let mut records = read_runs(&path)?;
    let computed = records.len() - kept.len();
    canonical_order(plan, &mut records);
    write_runs(&path, &records)?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    Ok(RunSummary {
        path,
        records,
        computed,
        failed,
    })
}

pub fn expected_keys(plan: &ExperimentPlan) -> BTreeSet<RunKey> {
    let mut out = BTreeSet::new();
    for s in &plan.suites {
        for e in &plan.encoders {
            for &seed in &plan.seeds {
                for &bs in &plan.batch_sizes {
                    for m in plan.adapter_configs() {
                        out.insert(RunKey {
                            suite: s.name.clone(),
                            encoder: e.label(),
                            seed,
                            batch_size: bs,
                            method: m.label(),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Stage 1 only: write every cell's checkpoint.
pub fn finetune_plan(plan: &ExperimentPlan) -> Result<Vec<PathBuf>> {
    plan.validate()?;
    let mut cells = Vec::new();
    for suite in 0..plan.suites.len() {
        for encoder in 0..plan.encoders.len() {
            for &seed in &plan.seeds {
                cells.push(Cell { suite, encoder, seed });
            }
        }
    }
    let pool = thread_pool()?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let inputs = cell_inputs(plan, cell)?;
                let path = checkpoint_path(plan, &inputs.suite.name, &inputs.encoder.spec().kind.label(), cell.seed);
                obtain_checkpoint(&path, &inputs)?;
                Ok(path)
            })
            .collect()
    })
}
