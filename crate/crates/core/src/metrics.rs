//! Classification metrics, Δ_TTA and seed/batch-size aggregation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::shiftbench::Task;
use crate::{Error, Result};

/// Counts indexed `(true, predicted)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::shape("ConfusionMatrix", k * k, counts.len()));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|j| self.get(class, j)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, class)).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::shape("confusion_matrix", truth.len(), pred.len()));
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Data(format!("label pair ({t}, {p}) outside [0, {k})")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::UndefinedMetric("accuracy"));
    }
    let correct: u64 = (0..cm.k).map(|i| cm.get(i, i)).sum();
    Ok(correct as f64 / n as f64)
}

/// Mean recall over classes present in the ground truth.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    let mut present = 0usize;
    for i in 0..cm.k {
        let support = cm.support(i);
        if support > 0 {
            sum += cm.get(i, i) as f64 / support as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::UndefinedMetric("balanced_accuracy"));
    }
    Ok(sum / present as f64)
}

/// `(p_o - p_e) / (1 - p_e)`; defined as 0 when `p_e == 1`.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::UndefinedMetric("cohen_kappa"));
    }
    let n = n as f64;
    let po = (0..cm.k).map(|i| cm.get(i, i) as f64).sum::<f64>() / n;
    let pe = (0..cm.k)
        .map(|i| (cm.support(i) as f64 / n) * (cm.predicted(i) as f64 / n))
        .sum::<f64>();
    if pe >= 1.0 {
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::UndefinedMetric("weighted_f1"));
    }
    let mut acc = 0.0;
    for i in 0..cm.k {
        let tp = cm.get(i, i) as f64;
        let support = cm.support(i) as f64;
        let predicted = cm.predicted(i) as f64;
        // F1 = 2 tp / (support + predicted); zero precision and recall -> 0
        let f1 = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (support + predicted)
        };
        acc += support * f1;
    }
    Ok(acc / n as f64)
}

/// Mann–Whitney AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting one half. Computed from tie groups in exact integer
/// arithmetic, so it equals the pairwise count bit for bit.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("roc_auc", scores.len(), positive.len()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Average precision: `Σ (R_i - R_{i-1}) · P_i` over descending score
/// thresholds, tied scores forming a single threshold.
pub fn pr_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("pr_auc", scores.len(), positive.len()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("pr_auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// True labels, argmax predictions and the probabilities behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    pub probs: Matrix<f32>,
}

impl PredictionSet {
    pub fn new(labels: Vec<usize>, probs: Matrix<f32>) -> Result<Self> {
        if labels.len() != probs.rows() {
            return Err(Error::shape("PredictionSet", probs.rows(), labels.len()));
        }
        let k = probs.cols();
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        Ok(Self {
            predicted: probs.argmax_rows(),
            labels,
            probs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub cohen_kappa: f64,
    pub weighted_f1: f64,
    /// Binary tasks only; `None` also when a class is missing from the labels.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = [
        "accuracy",
        "balanced_accuracy",
        "cohen_kappa",
        "weighted_f1",
        "roc_auc",
        "pr_auc",
    ];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "balanced_accuracy" => Some(self.balanced_accuracy),
            "cohen_kappa" => Some(self.cohen_kappa),
            "weighted_f1" => Some(self.weighted_f1),
            "roc_auc" => self.roc_auc,
            "pr_auc" => self.pr_auc,
            _ => None,
        }
    }
}

pub fn evaluate(task: Task, set: &PredictionSet) -> Result<MetricReport> {
    let k = task.num_classes();
    if set.probs.cols() != k {
        return Err(Error::shape("evaluate", k, set.probs.cols()));
    }
    let cm = confusion_matrix(&set.labels, &set.predicted, k)?;
    let (roc, pr) = match task {
        Task::Binary => {
            let scores: Vec<f64> = (0..set.probs.rows()).map(|r| f64::from(set.probs.get(r, 1))).collect();
            let pos: Vec<bool> = set.labels.iter().map(|&y| y == 1).collect();
            (roc_auc(&scores, &pos).ok(), pr_auc(&scores, &pos).ok())
        }
        Task::Multiclass(_) => (None, None),
    };
    Ok(MetricReport {
        accuracy: accuracy(&cm)?,
        balanced_accuracy: balanced_accuracy(&cm)?,
        cohen_kappa: cohen_kappa(&cm)?,
        weighted_f1: weighted_f1(&cm)?,
        roc_auc: roc,
        pr_auc: pr,
    })
}

/// Δ_TTA = metric(TTA) − metric(No-TTA), for one seed and batch partition.
#[inline]
pub fn delta(metric_tta: f64, metric_no_tta: f64) -> f64 {
    metric_tta - metric_no_tta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (divisor n − 1); 0 when `n == 1`.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    /// True when `std` is the n = 1 convention rather than an estimate.
    pub fn std_degenerate(&self) -> bool {
        self.n < 2
    }
}

/// Mean and sample std over pooled cells. Cells are summed in sorted order so
/// the result does not depend on their arrangement.
pub fn aggregate(cells: &[f64]) -> Result<Aggregate> {
    if cells.is_empty() {
        return Err(Error::Data("cannot aggregate zero cells".into()));
    }
    let mut sorted = cells.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        libm::sqrt(sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    };
    Ok(Aggregate { mean, std, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(truth: &[usize], pred: &[usize], k: usize) -> ConfusionMatrix {
        confusion_matrix(truth, pred, k).unwrap()
    }

    #[test]
    fn confusion_matrix_examples() {
        let perfect = cm(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(perfect.get(i, j) == 0, i != j || perfect.support(i) == 0);
            }
        }
        assert_eq!(cm(&[], &[], 2).total(), 0);
        let c = cm(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert_eq!(c.counts, vec![1, 1, 0, 2]);
        assert!(confusion_matrix(&[0, 3], &[0, 0], 2).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&cm(&[0, 1], &[0, 1], 2)).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&cm(&[0, 0, 1, 1], &[0, 1, 1, 1], 2)).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&cm(&[0, 0, 1, 1], &[1, 1, 1, 1], 2)).unwrap(), 0.5);
        // class 2 absent from ground truth is skipped
        assert_eq!(balanced_accuracy(&cm(&[0, 1], &[0, 2], 3)).unwrap(), 0.5);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&cm(&[0, 1, 1], &[0, 1, 1], 2)).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&cm(&[0, 1, 0, 1], &[0, 1, 1, 0], 2)).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&cm(&[1, 1, 1], &[1, 1, 1], 2)).unwrap(), 0.0);
    }

    #[test]
    fn weighted_f1_examples() {
        assert_eq!(weighted_f1(&cm(&[0, 1, 2], &[0, 1, 2], 3)).unwrap(), 1.0);
        let v = weighted_f1(&cm(&[0, 0, 1, 1], &[0, 1, 1, 1], 2)).unwrap();
        assert!((v - (2.0 * (2.0 / 3.0) + 2.0 * 0.8) / 4.0).abs() < 1e-15);
        assert_eq!(weighted_f1(&cm(&[0, 1], &[1, 0], 2)).unwrap(), 0.0);
    }

    #[test]
    fn roc_examples() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, true, false]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(pr_auc(&[0.3; 4], &[true, false, false, false]).unwrap(), 0.25);
        let ap = pr_auc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + (2.0 / 3.0) * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn delta_examples() {
        assert!((delta(0.795, 0.608) - 0.187).abs() < 1e-9);
        assert_eq!(delta(0.42, 0.42), 0.0);
        assert!((delta(0.5, 0.608) + 0.108).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[0.3]).unwrap();
        assert_eq!((one.mean, one.std, one.std_degenerate()), (0.3, 0.0, true));
        let a = aggregate(&[0.1, 0.2, 0.3]).unwrap();
        assert!((a.mean - 0.2).abs() < 1e-15 && (a.std - 0.1).abs() < 1e-15);
        assert_eq!(aggregate(&[0.3, 0.1, 0.2]).unwrap(), a);
        assert!(aggregate(&[]).is_err());
    }
}
