//! The acceptance suite: oracle checks on the kernels and metrics, the Δ
//! arithmetic anchor, and behavioral checks on seeded shift suites run
//! through the full grid runner. Used by `neuroadapt selftest` and by the
//! `acceptance` test target.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use neuroadapt_core::finetune::{finetune_dataset, FinetuneConfig};
use neuroadapt_core::hash::to_hex;
use neuroadapt_core::metrics::{
    accuracy, balanced_accuracy, cohen_kappa, confusion_matrix, pr_auc, roc_auc, weighted_f1, MetricReport,
};
use neuroadapt_core::model::{
    head_backward, head_forward, Encoder, EncoderKind, EncoderSpec, HeadParams, Mode, ParamSubset, BLOCK_NAMES,
};
use neuroadapt_core::numerics::{
    cross_entropy, gelu_backward, gelu_forward, layernorm_backward, layernorm_forward, linear_backward, linear_forward,
    mean_entropy, softmax, Matrix, Rng, LAYERNORM_EPS,
};
use neuroadapt_core::shiftbench::{generate_suite, ShiftKind, SignalMode, Split, SuiteSpec};
use neuroadapt_core::tta::{shot_loss, AdapterConfig, Method, ShotConfig, T3aConfig, T3aState, TentConfig, TentState};

use crate::ckpt::read_checkpoint;
use crate::error::Result;
use crate::plan::{ExperimentPlan, SuiteEntry};
use crate::report::{build_report, format_delta, write_report, Aggregation};
use crate::runner::{checkpoint_path, run_experiment, RunRecord, RunStatus, LIBRARY_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: usize,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {:>2}. {}: {}", self.id, self.title, self.detail)
    }
}

fn outcome(id: usize, title: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        id,
        title,
        passed,
        detail,
    }
}

// ---------------------------------------------------------------------------
// Suites used by the behavioral checks
// ---------------------------------------------------------------------------

pub const SUITE_CHANNELS: usize = 16;

/// Exchangeable source and target.
pub fn null_suite() -> SuiteSpec {
    SuiteSpec::null(2, SUITE_CHANNELS, 4000, 2000)
}

/// Balanced source, 0.9/0.1 target, class means 2σ apart.
pub fn label_shift_suite() -> SuiteSpec {
    SuiteSpec {
        kind: ShiftKind::LabelShift,
        target_priors: vec![0.9, 0.1],
        ..SuiteSpec::null(2, SUITE_CHANNELS, 4000, 2000)
    }
}

/// Per-channel gain 1, 1.5, 2 (cycling) and offsets of +3σ on even and
/// −0.5σ on odd channels; 12 800 target records, i.e. 200 batches of 64.
pub fn covariate_suite() -> SuiteSpec {
    SuiteSpec {
        kind: ShiftKind::CovariateShift,
        channel_gain: (0..SUITE_CHANNELS).map(|i| 1.0 + 0.5 * (i % 3) as f64).collect(),
        channel_offset: (0..SUITE_CHANNELS)
            .map(|i| if i % 2 == 0 { 3.0 } else { -0.5 })
            .collect(),
        ..SuiteSpec::null(2, SUITE_CHANNELS, 4000, 12_800)
    }
}

/// Small oscillatory-window suite for exercising non-trivial encoders.
pub fn window_suite() -> SuiteSpec {
    SuiteSpec {
        kind: ShiftKind::ModalityShift,
        mode: SignalMode::Windows {
            samples: 32,
            sample_rate: 64.0,
        },
        dropped_channels: vec![0],
        modality_gain: 1.5,
        normalize_p95: true,
        ..SuiteSpec::null(3, 4, 600, 300)
    }
}

fn plan(
    dir: &Path,
    suites: Vec<(&str, SuiteSpec)>,
    methods: Vec<AdapterConfig>,
    batch_sizes: Vec<usize>,
) -> ExperimentPlan {
    ExperimentPlan {
        suites: suites
            .into_iter()
            .map(|(name, spec)| SuiteEntry {
                name: name.into(),
                spec: Some(spec),
                path: None,
            })
            .collect(),
        encoders: vec![EncoderKind::Identity],
        methods,
        batch_sizes,
        seeds: (0..5).collect(),
        finetune: FinetuneConfig::default(),
        output_dir: dir.to_path_buf(),
        plan_seed: 0,
        trace: false,
    }
}

fn labeled(method: Method, label: &str, edit: impl FnOnce(&mut AdapterConfig)) -> AdapterConfig {
    let mut c = AdapterConfig::new(method);
    c.label = Some(label.into());
    edit(&mut c);
    c
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor for components that are zero analytically; central
/// differences at h = 1e-6 carry about 1e-10 of round-off.
const FD_ABS_FLOOR: f64 = 1e-8;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.normal() * scale)
}

fn random_vec(rng: &mut Rng, n: usize, mean: f64, scale: f64) -> Vec<f64> {
    (0..n).map(|_| mean + rng.normal() * scale).collect()
}

/// Compare an analytic gradient with central differences of `loss` around
/// `params`. Returns the worst error as a fraction of its tolerance, or a
/// description of the first failing component.
fn fd_compare(params: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> std::result::Result<f64, String> {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let h = 1e-6 * params[i].abs().max(1.0);
        p[i] = params[i] + h;
        let up = loss(&p);
        p[i] = params[i] - h;
        let down = loss(&p);
        p[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs();
        let tol = FD_REL_TOL * a.abs().max(numeric.abs()) + FD_ABS_FLOOR;
        if err > tol {
            return Err(format!("component {i}: analytic {a:e} vs numeric {numeric:e}"));
        }
        worst = worst.max(err / tol);
    }
    Ok(worst)
}

fn split3(p: &[f64], a: usize, b: usize) -> (&[f64], &[f64], &[f64]) {
    (&p[..a], &p[a..a + b], &p[a + b..])
}

fn dot(m: &Matrix<f64>, r: &Matrix<f64>) -> f64 {
    m.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
}

fn grad_layernorm(rng: &mut Rng) -> std::result::Result<f64, String> {
    let (b, d) = (1 + rng.below(5), 2 + rng.below(6));
    let x = random_matrix(rng, b, d, 1.5);
    let gamma = random_vec(rng, d, 1.0, 0.3);
    let beta = random_vec(rng, d, 0.0, 0.3);
    let r = random_matrix(rng, b, d, 1.0);
    let eps = LAYERNORM_EPS;
    let (_, cache) = layernorm_forward(&x, &gamma, &beta, eps).map_err(|e| e.to_string())?;
    let (dx, dg, db) = layernorm_backward(&cache, &r).map_err(|e| e.to_string())?;
    let params: Vec<f64> = [x.as_slice(), &gamma, &beta].concat();
    let analytic: Vec<f64> = [dx.as_slice(), &dg, &db].concat();
    fd_compare(&params, &analytic, |p| {
        let (xs, g, bt) = split3(p, b * d, d);
        let x = Matrix::from_vec(b, d, xs.to_vec()).unwrap();
        dot(&layernorm_forward(&x, g, bt, eps).unwrap().0, &r)
    })
}

fn grad_linear(rng: &mut Rng) -> std::result::Result<f64, String> {
    let (b, i, o) = (1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(5));
    let x = random_matrix(rng, b, i, 1.0);
    let w = random_matrix(rng, i, o, 0.7);
    let bias = random_vec(rng, o, 0.0, 0.5);
    let r = random_matrix(rng, b, o, 1.0);
    let (_, cache) = linear_forward(&x, &w, &bias).map_err(|e| e.to_string())?;
    let (dx, dw, db) = linear_backward(&cache, &r).map_err(|e| e.to_string())?;
    let params: Vec<f64> = [x.as_slice(), w.as_slice(), &bias].concat();
    let analytic: Vec<f64> = [dx.as_slice(), dw.as_slice(), &db].concat();
    fd_compare(&params, &analytic, |p| {
        let (xs, ws, bs) = split3(p, b * i, i * o);
        let x = Matrix::from_vec(b, i, xs.to_vec()).unwrap();
        let w = Matrix::from_vec(i, o, ws.to_vec()).unwrap();
        dot(&linear_forward(&x, &w, bs).unwrap().0, &r)
    })
}

fn grad_gelu(rng: &mut Rng) -> std::result::Result<f64, String> {
    let (b, d) = (1 + rng.below(5), 1 + rng.below(6));
    let x = random_matrix(rng, b, d, 2.0);
    let r = random_matrix(rng, b, d, 1.0);
    let (_, cache) = gelu_forward(&x);
    let dx = gelu_backward(&cache, &r).map_err(|e| e.to_string())?;
    fd_compare(x.as_slice(), dx.as_slice(), |p| {
        dot(&gelu_forward(&Matrix::from_vec(b, d, p.to_vec()).unwrap()).0, &r)
    })
}

fn grad_cross_entropy(rng: &mut Rng) -> std::result::Result<f64, String> {
    let (b, k) = (1 + rng.below(6), 2 + rng.below(4));
    let logits = random_matrix(rng, b, k, 2.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
    let (_, g) = cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
    fd_compare(logits.as_slice(), g.as_slice(), |p| {
        cross_entropy(&Matrix::from_vec(b, k, p.to_vec()).unwrap(), &labels)
            .unwrap()
            .0
    })
}

fn grad_shot_loss(rng: &mut Rng) -> std::result::Result<f64, String> {
    let (b, k) = (1 + rng.below(8), 2 + rng.below(4));
    let logits = random_matrix(rng, b, k, 1.5);
    let pseudo: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
    let cfg = ShotConfig {
        ent_weight: rng.uniform() * 2.0,
        mi_weight: rng.uniform() * 2.0,
        pl_weight: rng.uniform() * 2.0,
        ..ShotConfig::default()
    };
    let (_, g) = shot_loss(&logits, &pseudo, &cfg).map_err(|e| e.to_string())?;
    fd_compare(logits.as_slice(), g.as_slice(), |p| {
        shot_loss(&Matrix::from_vec(b, k, p.to_vec()).unwrap(), &pseudo, &cfg)
            .unwrap()
            .0
            .total
    })
}

fn random_head(rng: &mut Rng, d: usize, k: usize, hidden: usize) -> HeadParams<f64> {
    let mut head = HeadParams::<f64>::init(d, k, hidden, rng);
    for v in head.ln_gamma.iter_mut() {
        *v += rng.normal() * 0.3;
    }
    for v in head
        .ln_beta
        .iter_mut()
        .chain(head.b1.iter_mut())
        .chain(head.b2.iter_mut())
    {
        *v += rng.normal() * 0.3;
    }
    head
}

fn head_with(base: &HeadParams<f64>, flat: &[f64], blocks: &[usize]) -> HeadParams<f64> {
    let mut h = base.clone();
    let mut off = 0;
    let mut tensors = h.tensors_mut();
    for &bi in blocks {
        let t = &mut tensors[bi];
        t.copy_from_slice(&flat[off..off + t.len()]);
        off += t.len();
    }
    h
}

/// Tent objective end to end: mean entropy of the head's predictions
/// w.r.t. the LayerNorm affine parameters.
fn grad_tent_objective(rng: &mut Rng) -> std::result::Result<f64, String> {
    let (b, d, k, hidden) = (2 + rng.below(6), 2 + rng.below(5), 2 + rng.below(3), 3 + rng.below(6));
    let head = random_head(rng, d, k, hidden);
    let z = Matrix::from_fn(b, d, |_, c| rng.normal() + if c % 2 == 0 { 1.0 } else { -0.5 });
    let (logits, cache) = head_forward(&head, &z, Mode::Eval).map_err(|e| e.to_string())?;
    let (_, dlogits) = mean_entropy(&logits).map_err(|e| e.to_string())?;
    let g = head_backward(&head, &cache, &dlogits, ParamSubset::NormAffineOnly).map_err(|e| e.to_string())?;
    let params: Vec<f64> = [&head.ln_gamma[..], &head.ln_beta[..]].concat();
    let analytic: Vec<f64> = [&g.ln_gamma[..], &g.ln_beta[..]].concat();
    fd_compare(&params, &analytic, |p| {
        let h = head_with(&head, p, &[0, 1]);
        mean_entropy(&head_forward(&h, &z, Mode::Eval).unwrap().0).unwrap().0
    })
}

/// Whole head under cross-entropy, all six blocks.
fn grad_head_all(rng: &mut Rng) -> std::result::Result<f64, String> {
    let (b, d, k, hidden) = (1 + rng.below(5), 2 + rng.below(4), 2 + rng.below(3), 2 + rng.below(5));
    let head = random_head(rng, d, k, hidden);
    let z = random_matrix(rng, b, d, 1.2);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
    let (logits, cache) = head_forward(&head, &z, Mode::Eval).map_err(|e| e.to_string())?;
    let (_, dlogits) = cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
    let g = head_backward(&head, &cache, &dlogits, ParamSubset::AllHead).map_err(|e| e.to_string())?;
    let params: Vec<f64> = head.tensors().concat();
    let analytic: Vec<f64> = g.tensors().concat();
    fd_compare(&params, &analytic, |p| {
        let h = head_with(&head, p, &[0, 1, 2, 3, 4, 5]);
        cross_entropy(&head_forward(&h, &z, Mode::Eval).unwrap().0, &labels)
            .unwrap()
            .0
    })
}

pub const GRADIENT_INSTANCES: usize = 100;

type GradCase = fn(&mut Rng) -> std::result::Result<f64, String>;

pub fn check_gradients() -> CheckOutcome {
    let cases: [(&str, GradCase); 7] = [
        ("layernorm", grad_layernorm),
        ("linear", grad_linear),
        ("gelu", grad_gelu),
        ("cross_entropy", grad_cross_entropy),
        ("shot_loss", grad_shot_loss),
        ("tent_objective", grad_tent_objective),
        ("head_all_blocks", grad_head_all),
    ];
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (name, case) in cases {
        for i in 0..GRADIENT_INSTANCES {
            let mut rng = Rng::derive(1, &format!("selftest/grad/{name}"), i as u64);
            match case(&mut rng) {
                Ok(w) => worst = worst.max(w),
                Err(e) => failures.push(format!("{name}#{i}: {e}")),
            }
        }
    }
    let detail = if failures.is_empty() {
        format!(
            "7 kernels x {GRADIENT_INSTANCES} instances in f64, worst error at {:.1}% of tolerance ({FD_REL_TOL:e} relative + {FD_ABS_FLOOR:e})",
            worst * 100.0
        )
    } else {
        format!("{} failures, first: {}", failures.len(), failures[0])
    };
    outcome(1, "gradient correctness", failures.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// 2. Metric oracles
// ---------------------------------------------------------------------------

/// Share of (positive, negative) pairs with the positive scored higher, ties
/// counting one half, by direct enumeration.
pub fn brute_force_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Average precision by re-counting TP and FP at every distinct threshold.
fn brute_force_ap(scores: &[f64], positive: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let mut ap = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(positive).filter(|(&s, &y)| s >= t && y).count() as f64;
        let fp = scores.iter().zip(positive).filter(|(&s, &y)| s >= t && !y).count() as f64;
        let recall = tp / p;
        ap += (recall - prev) * (tp / (tp + fp));
        prev = recall;
    }
    ap
}

struct Oracle {
    accuracy: f64,
    balanced: f64,
    kappa: f64,
    weighted_f1: f64,
}

/// Textbook definitions evaluated from the raw label vectors.
fn metric_oracle(truth: &[usize], pred: &[usize], k: usize) -> Oracle {
    let n = truth.len() as f64;
    let count = |f: &dyn Fn(usize, usize) -> bool| truth.iter().zip(pred).filter(|(&t, &p)| f(t, p)).count();
    let correct = count(&|t, p| t == p) as f64;
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut pe = 0.0;
    let mut f1_acc = 0.0;
    for c in 0..k {
        let support = count(&|t, _| t == c) as f64;
        let predicted = count(&|_, p| p == c) as f64;
        let tp = count(&|t, p| t == c && p == c) as f64;
        if support > 0.0 {
            recall_sum += tp / support;
            present += 1;
        }
        pe += (support / n) * (predicted / n);
        let f1 = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (support + predicted)
        };
        f1_acc += support * f1;
    }
    let po = correct / n;
    Oracle {
        accuracy: correct / n,
        balanced: recall_sum / present as f64,
        kappa: if pe >= 1.0 { 0.0 } else { (po - pe) / (1.0 - pe) },
        weighted_f1: f1_acc / n,
    }
}

/// Visit every K×K count matrix with total in 1..=max_n.
fn enumerate_confusions(k: usize, max_n: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(cells: &mut Vec<usize>, left: usize, slots: usize, visit: &mut dyn FnMut(&[usize])) {
        if cells.len() == slots {
            if cells.iter().sum::<usize>() > 0 {
                visit(cells);
            }
            return;
        }
        for c in 0..=left {
            cells.push(c);
            rec(cells, left - c, slots, visit);
            cells.pop();
        }
    }
    rec(&mut Vec::with_capacity(k * k), max_n, k * k, visit);
}

fn expand(counts: &[usize], k: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut pairs = Vec::new();
    for (idx, &c) in counts.iter().enumerate() {
        pairs.extend(std::iter::repeat_n((idx / k, idx % k), c));
    }
    rng.shuffle(&mut pairs);
    pairs.into_iter().unzip()
}

pub fn check_metric_oracles() -> CheckOutcome {
    let mut failures: Vec<String> = Vec::new();
    let mut rng = Rng::derive(2, "selftest/auc", 0);
    let mut auc_cases = 0;
    for i in 0..1000 {
        let n = 2 + rng.below(199);
        // few distinct levels -> heavy ties
        let levels = 1 + rng.below(if i % 2 == 0 { 4 } else { 50 });
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        pos[0] = true;
        pos[1] = false;
        let fast = roc_auc(&scores, &pos).unwrap();
        let slow = brute_force_auc(&scores, &pos);
        if (fast - slow).abs() > 1e-12 {
            failures.push(format!("roc_auc instance {i}: {fast} vs {slow}"));
        }
        auc_cases += 1;
    }

    let mut matrices = 0usize;
    let mut check = |counts: &[usize], k: usize, rng: &mut Rng| {
        let (truth, pred) = expand(counts, k, rng);
        let cm = confusion_matrix(&truth, &pred, k).unwrap();
        let o = metric_oracle(&truth, &pred, k);
        let got = [
            accuracy(&cm).unwrap(),
            balanced_accuracy(&cm).unwrap(),
            cohen_kappa(&cm).unwrap(),
            weighted_f1(&cm).unwrap(),
        ];
        let want = [o.accuracy, o.balanced, o.kappa, o.weighted_f1];
        if got.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) && failures.len() < 20 {
            failures.push(format!("counts {counts:?}: {got:?} vs {want:?}"));
        }
        matrices += 1;
    };
    let mut rng = Rng::derive(2, "selftest/confusion", 0);
    // every 2x2 matrix up to N = 12 and every 3x3 matrix up to N = 8
    enumerate_confusions(2, 12, &mut |c| check(c, 2, &mut rng));
    enumerate_confusions(3, 8, &mut |c| check(c, 3, &mut rng));
    // 4x4 has ~3e7 matrices up to N = 12; sample them
    for _ in 0..50_000 {
        let n = 1 + rng.below(12);
        let mut counts = vec![0usize; 16];
        for _ in 0..n {
            counts[rng.below(16)] += 1;
        }
        check(&counts, 4, &mut rng);
    }

    let mut ap_cases = 0;
    let mut rng = Rng::derive(2, "selftest/ap", 0);
    for i in 0..20_000 {
        let n = 1 + rng.below(12);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 / 4.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        pos[0] = true;
        let fast = pr_auc(&scores, &pos).unwrap();
        let slow = brute_force_ap(&scores, &pos);
        if fast.to_bits() != slow.to_bits() && failures.len() < 20 {
            failures.push(format!("pr_auc instance {i}: {fast} vs {slow}"));
        }
        ap_cases += 1;
    }
    let detail = if failures.is_empty() {
        format!(
            "{auc_cases} ROC-AUC instances within 1e-12 of pairwise count; {matrices} confusion matrices and {ap_cases} AP instances bit-identical to direct formulas"
        )
    } else {
        format!("{} mismatches, first: {}", failures.len(), failures[0])
    };
    outcome(2, "metric oracle equivalence", failures.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// 3. Δ arithmetic anchor
// ---------------------------------------------------------------------------

fn synthetic_record(method: Method, label: &str, balanced: f64) -> RunRecord {
    let suite = SuiteSpec::null(2, 2, 10, 10);
    let metrics = MetricReport {
        accuracy: balanced,
        balanced_accuracy: balanced,
        cohen_kappa: 0.0,
        weighted_f1: balanced,
        roc_auc: None,
        pr_auc: None,
    };
    RunRecord {
        suite: "chb_mit".into(),
        encoder: "reve_large".into(),
        seed: 0,
        batch_size: 64,
        method: label.into(),
        method_kind: method,
        status: RunStatus::Ok,
        metrics: Some(metrics),
        error: None,
        checkpoint_hash: Some("00".repeat(32)),
        encoder_hash: None,
        head_blocks: None,
        prob_marginal: None,
        label_marginal: None,
        n_target: 0,
        wall_time_ms: 0,
        library_version: LIBRARY_VERSION.into(),
        config: crate::runner::RunConfig {
            suite: SuiteEntry {
                name: "chb_mit".into(),
                spec: Some(suite),
                path: None,
            },
            encoder: EncoderSpec::new(EncoderKind::Identity, 2, 1),
            finetune: FinetuneConfig::default(),
            adapter: AdapterConfig::new(method),
            plan_seed: 0,
            rng: String::new(),
        },
    }
}

pub fn check_delta_anchor(dir: &Path) -> Result<CheckOutcome> {
    // Absolute balanced accuracies of the published seizure-detection pair.
    let records = vec![
        synthetic_record(Method::NoTta, "no_tta", 0.608),
        synthetic_record(Method::T3a, "t3a", 0.795),
    ];
    let summary = build_report(&records, false, Aggregation::Pooled)?;
    write_report(&summary, dir)?;
    let row = summary.pooled.iter().find(|r| r.method == "t3a").expect("t3a row");
    let d = row.delta["balanced_accuracy"];
    let csv = fs::read_to_string(dir.join("deltas.csv")).map_err(|e| crate::HarnessError::io(dir, e))?;
    let cell = format_delta(&d);
    let passed = (d.mean - 0.187).abs() <= 1e-9 && cell == "+0.187 ± 0.000" && csv.contains("+0.187 ± 0.000");
    Ok(outcome(
        3,
        "delta arithmetic anchor",
        passed,
        format!("0.795 - 0.608 -> mean {:.12}, CSV cell {cell:?}", d.mean),
    ))
}

// ---------------------------------------------------------------------------
// 4. T3A ≡ No-TTA at init
// ---------------------------------------------------------------------------

pub fn check_t3a_init_equivalence() -> CheckOutcome {
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for h in 0..10u64 {
        let mut rng = Rng::derive(4, "selftest/t3a_init", h);
        let (d, k) = (4 + rng.below(12), 2 + rng.below(4));
        let mut head = HeadParams::<f32>::init(d, k, 32, &mut rng);
        head.b2 = vec![0.0; k];
        let state = T3aState::new(head.clone(), T3aConfig::default()).expect("valid config");
        let z = Matrix::from_fn(1000, d, |_, _| (rng.normal() * 2.0) as f32);
        let t3a = state.predict(&z).expect("shapes agree").argmax_rows();
        let (logits, _) = head_forward(&head, &z, Mode::Eval).expect("shapes agree");
        let base = softmax(&logits).expect("K >= 2").argmax_rows();
        mismatches += t3a.iter().zip(&base).filter(|(a, b)| a != b).count();
        total += z.rows();
    }
    outcome(
        4,
        "T3A/No-TTA equivalence at init",
        mismatches == 0,
        format!("{mismatches} argmax mismatches over {total} random inputs (10 heads, b2 = 0)"),
    )
}

// ---------------------------------------------------------------------------
// 5. Entropy descent
// ---------------------------------------------------------------------------

pub fn check_entropy_descent() -> Result<CheckOutcome> {
    let mut spec = covariate_suite();
    spec.n_target = 6400;
    let data = generate_suite(&spec)?;
    let encoder = Encoder::new(EncoderSpec::new(EncoderKind::Identity, spec.channels, 1))?;
    let (ck, _) = finetune_dataset(&FinetuneConfig::default(), &data.source, &encoder)?;
    let target = data.target.subset(Split::Test);
    let cfg = TentConfig {
        lr: 1e-4,
        ..TentConfig::default()
    };
    let mut decreased = 0;
    let mut min_drop = f64::INFINITY;
    for i in 0..100u64 {
        let mut rng = Rng::derive(5, "selftest/entropy_batch", i);
        let idx: Vec<usize> = (0..64).map(|_| rng.below(target.len())).collect();
        let z = encoder.encode(&target.batch(&idx).strip_labels())?.z;
        let z64 = z.cast::<f64>();
        let entropy = |h: &HeadParams<f32>| -> Result<f64> {
            let (logits, _) = head_forward(&h.cast::<f64>(), &z64, Mode::Eval)?;
            Ok(mean_entropy(&logits)?.0)
        };
        let before = entropy(&ck.head)?;
        let mut state = TentState::new(ck.head.clone(), cfg);
        state.step(&z, i as usize)?;
        let after = entropy(state.head())?;
        if after < before {
            decreased += 1;
        }
        min_drop = min_drop.min(before - after);
    }
    Ok(outcome(
        5,
        "entropy descent",
        decreased >= 95,
        format!("one Tent step at lr 1e-4 lowered mean entropy on {decreased}/100 shifted batches (smallest drop {min_drop:.3e})"),
    ))
}

// ---------------------------------------------------------------------------
// Grid-based checks
// ---------------------------------------------------------------------------

fn partner<'a>(records: &'a [RunRecord], r: &RunRecord) -> Option<&'a RunRecord> {
    records.iter().find(|b| {
        b.method_kind == Method::NoTta
            && (b.suite.as_str(), b.encoder.as_str(), b.seed, b.batch_size)
                == (r.suite.as_str(), r.encoder.as_str(), r.seed, r.batch_size)
    })
}

fn delta_bacc(records: &[RunRecord], r: &RunRecord) -> Option<f64> {
    let b = partner(records, r)?;
    Some(r.metrics?.balanced_accuracy - b.metrics?.balanced_accuracy)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub struct GridRuns {
    pub collapse: Vec<RunRecord>,
    pub label_shift: Vec<RunRecord>,
    pub null: Vec<RunRecord>,
    pub windows: Vec<RunRecord>,
    pub plans: Vec<ExperimentPlan>,
}

fn all_methods() -> Vec<AdapterConfig> {
    Method::ALL.iter().map(|&m| AdapterConfig::new(m)).collect()
}

fn windows_plan(dir: &Path) -> ExperimentPlan {
    let mut p = plan(dir, vec![("windows", window_suite())], all_methods(), vec![32, 64]);
    p.encoders = vec![
        EncoderKind::TwoLayer {
            hidden: 16,
            out_dim: 12,
            seed: 3,
        },
        EncoderKind::RandomProjection { out_dim: 10, seed: 4 },
    ];
    p.seeds = vec![0, 1];
    p.finetune.epochs = 4;
    p.trace = true;
    p
}

/// Run the four grids the behavioral checks read.
pub fn run_grids(dir: &Path) -> Result<GridRuns> {
    let collapse = plan(
        &dir.join("collapse"),
        vec![("covariate", covariate_suite())],
        vec![labeled(Method::Tent, "tent_lr1", |c| c.tent.lr = 1.0)],
        vec![64],
    );
    let label = plan(
        &dir.join("label_shift"),
        vec![("label_shift", label_shift_suite())],
        vec![
            AdapterConfig::new(Method::Tent),
            AdapterConfig::new(Method::T3a),
            AdapterConfig::new(Method::Shot),
            labeled(Method::Shot, "shot_ent", |c| c.shot.mi_weight = 0.0),
        ],
        vec![64, 128, 256],
    );
    let null = plan(
        &dir.join("null"),
        vec![("null", null_suite())],
        all_methods(),
        vec![64, 128, 256],
    );
    let windows = windows_plan(&dir.join("windows"));
    let run = |p: &ExperimentPlan| run_experiment(p, false).map(|s| s.records);
    Ok(GridRuns {
        collapse: run(&collapse)?,
        label_shift: run(&label)?,
        null: run(&null)?,
        windows: run(&windows)?,
        plans: vec![collapse, label, null, windows],
    })
}

pub fn check_collapse(runs: &GridRuns) -> CheckOutcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in runs.collapse.iter().filter(|r| r.method == "tent_lr1") {
        let peak = r
            .label_marginal
            .as_ref()
            .map_or(0.0, |m| m.iter().cloned().fold(0.0, f64::max));
        let d = delta_bacc(&runs.collapse, r).unwrap_or(f64::NAN);
        if r.is_ok() && peak >= 0.9 && d < 0.0 {
            ok += 1;
        }
        parts.push(format!("s{}: max {peak:.3}, Δ {d:+.3}", r.seed));
    }
    outcome(
        6,
        "Tent collapse at lr 1.0",
        ok == 5 && parts.len() == 5,
        format!(
            "{ok}/5 seeds collapsed with negative Δ balanced accuracy over 200 batches ({})",
            parts.join("; ")
        ),
    )
}

pub fn check_label_shift(runs: &GridRuns) -> CheckOutcome {
    let deltas = |label: &str| -> Vec<f64> {
        runs.label_shift
            .iter()
            .filter(|r| r.method == label)
            .filter_map(|r| delta_bacc(&runs.label_shift, r))
            .collect()
    };
    let (t3a, tent) = (deltas("t3a"), deltas("tent"));
    let (mt, mn) = (mean(&t3a), mean(&tent));
    outcome(
        7,
        "T3A label-shift recalibration",
        t3a.len() == 15 && tent.len() == 15 && mt > 0.0 && mt > mn,
        format!("mean Δ balanced accuracy over 5 seeds x 3 batch sizes: T3A {mt:+.4}, Tent {mn:+.4}"),
    )
}

pub fn check_shot_diversity(runs: &GridRuns) -> CheckOutcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let h = |label: &str| -> Vec<f64> {
            runs.label_shift
                .iter()
                .filter(|r| r.method == label && r.seed == seed)
                .filter_map(|r| r.prob_marginal.as_deref().map(entropy))
                .collect()
        };
        let (full, ent_only) = (h("shot"), h("shot_ent"));
        let held = full.len() == 3 && ent_only.len() == 3 && full.iter().zip(&ent_only).all(|(a, b)| a >= b);
        if held {
            wins += 1;
        }
        parts.push(format!("s{seed}: {:.5} vs {:.5}", mean(&full), mean(&ent_only)));
    }
    outcome(
        8,
        "SHOT diversity guard",
        wins >= 4,
        format!(
            "marginal entropy with mi_weight 1 >= mi_weight 0 at every batch size in {wins}/5 seeds ({})",
            parts.join("; ")
        ),
    )
}

/// Expected frozen blocks per method, by block index.
fn frozen_blocks(method: Method) -> &'static [usize] {
    match method {
        Method::NoTta | Method::T3a => &[0, 1, 2, 3, 4, 5],
        Method::Tent => &[2, 3, 4, 5],
        Method::Shot => &[4, 5],
    }
}

fn frozen_violations(plan: &ExperimentPlan, records: &[RunRecord]) -> Vec<String> {
    let mut out = Vec::new();
    let mut checkpoints: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for r in records {
        let key = r.key();
        if !r.is_ok() {
            out.push(format!("{key}: run failed: {}", r.error.as_deref().unwrap_or("")));
            continue;
        }
        match Encoder::new(r.config.encoder.clone()) {
            Ok(fresh) if r.encoder_hash.as_deref() == Some(to_hex(&fresh.param_fingerprint()).as_str()) => {}
            _ => out.push(format!("{key}: encoder hash changed")),
        }
        let path = checkpoint_path(plan, &r.suite, &r.encoder, r.seed);
        let ck_blocks = checkpoints
            .entry(path.display().to_string())
            .or_insert_with(|| match read_checkpoint(&path) {
                Ok((ck, _)) => BLOCK_NAMES
                    .iter()
                    .zip(ck.head.block_fingerprints())
                    .map(|(n, h)| (n.to_string(), to_hex(&h)))
                    .collect(),
                Err(_) => BTreeMap::new(),
            });
        let Some(blocks) = &r.head_blocks else {
            out.push(format!("{key}: no block hashes"));
            continue;
        };
        for &bi in frozen_blocks(r.method_kind) {
            let name = BLOCK_NAMES[bi];
            if blocks.get(name) != ck_blocks.get(name) || blocks.get(name).is_none() {
                out.push(format!("{key}: {name} differs from checkpoint"));
            }
        }
    }
    out
}

pub fn check_frozen(runs: &GridRuns) -> CheckOutcome {
    let grids = [&runs.collapse, &runs.label_shift, &runs.null, &runs.windows];
    let mut violations = Vec::new();
    let mut n = 0;
    for (plan, records) in runs.plans.iter().zip(grids) {
        violations.extend(frozen_violations(plan, records));
        n += records.len();
    }
    outcome(
        9,
        "frozen-parameter contracts",
        violations.is_empty() && n > 0,
        if violations.is_empty() {
            format!("{n} records across 4 grids: encoder, classifier and non-adapted head blocks byte-identical")
        } else {
            format!("{} violations, first: {}", violations.len(), violations[0])
        },
    )
}

fn strip_wall_time(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).expect("runner writes JSON");
            v.as_object_mut().expect("record object").remove("wall_time_ms");
            v
        })
        .collect()
}

pub fn check_determinism(dir: &Path) -> Result<CheckOutcome> {
    let mut texts = Vec::new();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let p = windows_plan(&dir.join(run));
        let summary = run_experiment(&p, false)?;
        let summary_report = build_report(&summary.records, true, Aggregation::Pooled)?;
        write_report(&summary_report, &dir.join(run).join("report"))?;
        texts.push(fs::read_to_string(&summary.path).map_err(|e| crate::HarnessError::io(&summary.path, e))?);
        let mut bytes = Vec::new();
        for f in ["deltas.csv", "absolute.csv", "deltas_by_batch_size.csv", "summary.json"] {
            let path = dir.join(run).join("report").join(f);
            bytes.push(fs::read(&path).map_err(|e| crate::HarnessError::io(&path, e))?);
        }
        csvs.push(bytes);
    }
    let same_records = strip_wall_time(&texts[0]) == strip_wall_time(&texts[1]);
    let same_reports = csvs[0] == csvs[1];
    let n = texts[0].lines().count();
    Ok(outcome(
        10,
        "end-to-end determinism",
        same_records && same_reports && n > 0,
        format!("two runs of a {n}-record plan: records identical modulo wall time = {same_records}, reports byte-identical = {same_reports}"),
    ))
}

pub fn check_null_shift(runs: &GridRuns) -> CheckOutcome {
    let mut worst = (0.0f64, String::new());
    let mut pairs = 0;
    let mut missing = 0;
    for r in runs.null.iter().filter(|r| r.method_kind != Method::NoTta) {
        match delta_bacc(&runs.null, r) {
            Some(d) => {
                pairs += 1;
                if d.abs() > worst.0.abs() {
                    worst = (d, format!("{} s{} b{}", r.method, r.seed, r.batch_size));
                }
            }
            None => missing += 1,
        }
    }
    outcome(
        11,
        "null-shift sanity",
        missing == 0 && pairs > 0 && worst.0.abs() <= 0.05,
        format!(
            "{pairs} matched pairs, largest |Δ balanced accuracy| {:.4} ({})",
            worst.0.abs(),
            worst.1
        ),
    )
}

/// Every check in order; `dir` receives the grids' outputs.
pub fn run_all(dir: &Path) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![
        check_gradients(),
        check_metric_oracles(),
        check_delta_anchor(&dir.join("anchor"))?,
    ];
    out.push(check_t3a_init_equivalence());
    out.push(check_entropy_descent()?);
    let runs = run_grids(&dir.join("grids"))?;
    out.push(check_collapse(&runs));
    out.push(check_label_shift(&runs));
    out.push(check_shot_diversity(&runs));
    out.push(check_frozen(&runs));
    out.push(check_determinism(&dir.join("determinism"))?);
    out.push(check_null_shift(&runs));
    Ok(out)
}
