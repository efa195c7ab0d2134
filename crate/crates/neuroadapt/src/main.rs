use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neuroadapt::core::shiftbench::{generate_suite, ShiftKind, SuiteSpec};
use neuroadapt::fsutil::parse_json;
use neuroadapt::nadb::write_dataset;
use neuroadapt::plan::load_config;
use neuroadapt::report::{report, Aggregation};
use neuroadapt::runner::{finetune_plan, run_experiment};
use neuroadapt::{selftest, HarnessError, Result};

#[derive(Parser)]
#[command(
    name = "neuroadapt",
    version,
    about = "Test-time adaptation benchmark for frozen-encoder classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_kind(s: &str) -> std::result::Result<ShiftKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected subject_shift, label_shift, covariate_shift or modality_shift".into())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shift suite as NADB files plus manifests.
    Generate {
        #[arg(long, value_parser = parse_kind)]
        suite: ShiftKind,
        /// Suite spec JSON; `kind` and `seed` may be omitted.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and save every checkpoint a plan needs.
    Finetune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the adaptation grid and write runs.jsonl.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Keep finished records and compute only the missing ones.
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate a runs file into delta tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write tables split by batch size.
        #[arg(long)]
        by_batch_size: bool,
        /// Average batch sizes within each seed before taking mean ± std
        /// across seeds, instead of pooling every cell.
        #[arg(long)]
        seed_means: bool,
    },
    /// Run the built-in oracle and behavioral checks.
    Selftest {
        /// Keep the grid outputs here instead of a temp directory.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

fn generate(kind: ShiftKind, spec_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| HarnessError::io(spec_path, e))?;
    let mut value: serde_json::Value = parse_json(spec_path, &text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| HarnessError::format(spec_path, "suite spec must be a JSON object"))?;
    let kind = serde_json::to_value(kind).expect("enum serializes");
    if let Some(given) = obj.get("kind") {
        if *given != kind {
            return Err(HarnessError::Validation(format!(
                "--suite {kind} contradicts spec kind {given}"
            )));
        }
    }
    obj.insert("kind".into(), kind);
    obj.insert("seed".into(), seed.into());
    let spec: SuiteSpec = parse_json(spec_path, &value.to_string())?;
    let data = generate_suite(&spec)?;
    for (stem, ds) in [("source", &data.source), ("target", &data.target)] {
        let manifest = write_dataset(out, stem, ds)?;
        println!("{} ({} records)", manifest.display(), ds.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { suite, spec, seed, out } => generate(suite, &spec, seed, &out)?,
        Command::Finetune { config } => {
            let plan = load_config(&config)?;
            for p in finetune_plan(&plan)? {
                println!("{}", p.display());
            }
        }
        Command::Adapt { config, resume } => {
            let plan = load_config(&config)?;
            let summary = run_experiment(&plan, resume)?;
            println!(
                "{}: {} records ({} computed, {} failed)",
                summary.path.display(),
                summary.records.len(),
                summary.computed,
                summary.failed
            );
            if summary.failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report {
            runs,
            out,
            by_batch_size,
            seed_means,
        } => {
            let how = if seed_means {
                Aggregation::SeedMeans
            } else {
                Aggregation::Pooled
            };
            let summary = report(&runs, &out, by_batch_size, how)?;
            println!(
                "{}: {} records, {} failed, {} rows",
                out.display(),
                summary.records,
                summary.failed,
                summary.pooled.len()
            );
        }
        Command::Selftest { workdir } => {
            let tmp;
            let dir = match workdir {
                Some(d) => d,
                None => {
                    tmp = tempfile::tempdir().map_err(|e| HarnessError::io(std::env::temp_dir(), e))?;
                    tmp.path().to_path_buf()
                }
            };
            let outcomes = selftest::run_all(&dir)?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
