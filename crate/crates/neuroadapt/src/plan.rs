//! Experiment plans: which suites, encoders, methods, batch sizes and seeds
//! to run, loaded from JSON with defaults filled in.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use neuroadapt_core::finetune::FinetuneConfig;
use neuroadapt_core::model::EncoderKind;
use neuroadapt_core::numerics::Rng;
use neuroadapt_core::shiftbench::SuiteSpec;
use neuroadapt_core::tta::{AdapterConfig, Method};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::fsutil::read_json;

pub const DEFAULT_BATCH_SIZES: [usize; 3] = [64, 128, 256];

fn default_batch_sizes() -> Vec<usize> {
    DEFAULT_BATCH_SIZES.to_vec()
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_encoders() -> Vec<EncoderKind> {
    vec![EncoderKind::Identity]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// A suite is either generated from a spec (its `seed` is replaced per run)
/// or loaded from a directory holding `source.json` and `target.json`
/// manifests as written by `neuroadapt generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SuiteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub suites: Vec<SuiteEntry>,
    #[serde(default = "default_encoders")]
    pub encoders: Vec<EncoderKind>,
    /// No-TTA always runs as the matched baseline, listed or not.
    pub methods: Vec<AdapterConfig>,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Its `seed` field is ignored; each cell derives its own.
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub plan_seed: u64,
    /// Write per-batch adaptation diagnostics under `<output_dir>/traces`.
    #[serde(default)]
    pub trace: bool,
}

fn safe_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn unique<T: Ord + Clone>(items: &[T]) -> bool {
    items.iter().cloned().collect::<BTreeSet<_>>().len() == items.len()
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        if self.methods.is_empty() {
            return bad("method list is empty".into());
        }
        if self.suites.is_empty() || self.encoders.is_empty() || self.seeds.is_empty() || self.batch_sizes.is_empty() {
            return bad("suites, encoders, seeds and batch_sizes must all be non-empty".into());
        }
        for m in &self.methods {
            m.validate()?;
            if !safe_name(&m.label()) {
                return bad(format!("method label {:?} must be [A-Za-z0-9_.-]+", m.label()));
            }
        }
        let labels: Vec<String> = self.adapter_configs().iter().map(AdapterConfig::label).collect();
        if !unique(&labels) {
            return bad(format!("method labels must be unique, got {labels:?}"));
        }
        if self
            .methods
            .iter()
            .any(|m| m.method == Method::NoTta && m.label() != Method::NoTta.name())
        {
            return bad("the No-TTA baseline cannot be relabeled".into());
        }
        let names: Vec<&str> = self.suites.iter().map(|s| s.name.as_str()).collect();
        if !unique(&names) || names.iter().any(|n| !safe_name(n)) {
            return bad(format!("suite names must be unique and [A-Za-z0-9_.-]+, got {names:?}"));
        }
        for s in &self.suites {
            match (&s.spec, &s.path) {
                (Some(spec), None) => spec.validate()?,
                (None, Some(_)) => {}
                _ => return bad(format!("suite {:?} needs exactly one of `spec` or `path`", s.name)),
            }
        }
        let enc: Vec<String> = self.encoders.iter().map(EncoderKind::label).collect();
        if !unique(&enc) {
            return bad(format!("encoders must be distinct, got {enc:?}"));
        }
        if self.batch_sizes.contains(&0) || !unique(&self.batch_sizes) {
            return bad("batch sizes must be positive and distinct".into());
        }
        if !unique(&self.seeds) {
            return bad("seeds must be distinct".into());
        }
        self.finetune.validate()?;
        Ok(())
    }

    /// Methods in execution order: No-TTA first (added if absent), then the
    /// rest as listed.
    pub fn adapter_configs(&self) -> Vec<AdapterConfig> {
        let mut out = vec![self
            .methods
            .iter()
            .find(|m| m.method == Method::NoTta)
            .cloned()
            .unwrap_or_else(|| AdapterConfig::new(Method::NoTta))];
        out.extend(self.methods.iter().filter(|m| m.method != Method::NoTta).cloned());
        out
    }

    /// Records a full run produces: one per (suite, encoder, seed,
    /// batch size, method), with the shared No-TTA baseline counted once.
    pub fn cardinality(&self) -> usize {
        self.suites.len()
            * self.encoders.len()
            * self.seeds.len()
            * self.batch_sizes.len()
            * self.adapter_configs().len()
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        for s in &mut self.suites {
            if let Some(p) = s.path.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
    }
}

/// Parse, apply defaults, resolve relative paths against the config file's
/// directory and validate.
pub fn load_config(path: &Path) -> Result<ExperimentPlan> {
    let mut plan: ExperimentPlan = read_json(path)?;
    plan.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    plan.validate()?;
    Ok(plan)
}

/// Seed for data generation: depends on the suite and seed only, so every
/// encoder sees the same draw.
pub fn data_seed(plan_seed: u64, suite: &str, seed: u64) -> u64 {
    Rng::derive_seed(plan_seed, &format!("data/{suite}"), seed)
}

/// Seed for head initialization, shuffling and dropout in one cell.
pub fn finetune_seed(plan_seed: u64, suite: &str, encoder: &str, seed: u64) -> u64 {
    Rng::derive_seed(plan_seed, &format!("finetune/{suite}/{encoder}"), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsutil::parse_json;

    fn parse(text: &str) -> Result<ExperimentPlan> {
        let plan: ExperimentPlan = parse_json(Path::new("plan.json"), text)?;
        plan.validate()?;
        Ok(plan)
    }

    const MINIMAL: &str = r#"{
        "suites": [{"name": "null", "spec": {"kind": "subject_shift", "num_classes": 2, "channels": 4,
                                             "n_source": 100, "n_target": 50}}],
        "methods": [{"method": "t3a"}]
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let p = parse(MINIMAL).unwrap();
        assert_eq!(p.finetune.lr, 1e-3);
        assert_eq!(p.finetune.epochs, 10);
        assert_eq!(p.methods[0].t3a.filter_k, 20);
        assert_eq!(p.batch_sizes, vec![64, 128, 256]);
        assert_eq!(p.seeds.len(), 5);
        assert_eq!(p.encoders, vec![EncoderKind::Identity]);
        let labels: Vec<String> = p.adapter_configs().iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["no_tta", "t3a"]);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let text = MINIMAL.replace(r#""method": "t3a""#, r#""method": "t3a", "t3a": {"filterk": 3}"#);
        match parse(&text) {
            Err(HarnessError::Json { at, .. }) => assert_eq!(at, "methods[0].t3a.filterk"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_methods_rejected() {
        let text = MINIMAL.replace(r#"[{"method": "t3a"}]"#, "[]");
        assert!(matches!(parse(&text), Err(HarnessError::Validation(_))));
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let p = parse(MINIMAL).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(parse(&text).unwrap(), p);
    }

    #[test]
    fn duplicate_labels_rejected() {
        let text = MINIMAL.replace(r#"[{"method": "t3a"}]"#, r#"[{"method": "tent"}, {"method": "tent"}]"#);
        assert!(matches!(parse(&text), Err(HarnessError::Validation(_))));
    }

    #[test]
    fn cardinality_matches_grid() {
        let mut p = parse(MINIMAL).unwrap();
        p.suites.push(SuiteEntry {
            name: "other".into(),
            ..p.suites[0].clone()
        });
        p.methods = Method::ALL.iter().map(|&m| AdapterConfig::new(m)).collect();
        assert_eq!(p.cardinality(), 2 * 3 * 5 * 4);
        p.methods.retain(|m| m.method != Method::NoTta);
        assert_eq!(p.cardinality(), 120);
    }
}
