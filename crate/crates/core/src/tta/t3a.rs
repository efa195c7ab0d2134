//! Prototype re-estimation: per-class support sets of low-entropy trunk
//! features, averaged into class templates that replace the classifier
//! weights at prediction time.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::BatchDiagnostics;
use crate::model::{head_forward, HeadParams, Mode};
use crate::numerics::{row_entropies, softmax, Matrix};
use crate::{Error, Result};

fn default_filter_k() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T3aConfig {
    #[serde(default = "default_filter_k")]
    pub filter_k: usize,
}

impl Default for T3aConfig {
    fn default() -> Self {
        Self {
            filter_k: default_filter_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    pub feature: Vec<f32>,
    pub entropy: f32,
    /// The class weight vector seeded at init; never evicted.
    pub anchor: bool,
    seq: u64,
}

#[derive(Debug, Clone)]
pub struct T3aState {
    head: HeadParams<f32>,
    supports: Vec<Vec<SupportEntry>>,
    /// `[hidden × K]`; column `k` is the prototype c_k.
    prototypes: Matrix<f32>,
    filter_k: usize,
    next_seq: u64,
}

impl T3aState {
    pub fn new(head: HeadParams<f32>, config: T3aConfig) -> Result<Self> {
        if config.filter_k == 0 {
            return Err(Error::Config("filter_k must be >= 1".into()));
        }
        let k = head.num_classes();
        let supports = (0..k)
            .map(|c| {
                vec![SupportEntry {
                    feature: head.class_weight(c),
                    entropy: 0.0,
                    anchor: true,
                    seq: c as u64,
                }]
            })
            .collect();
        let mut state = Self {
            prototypes: Matrix::zeros(head.hidden_dim(), k),
            head,
            supports,
            filter_k: config.filter_k,
            next_seq: k as u64,
        };
        state.recompute_prototypes();
        Ok(state)
    }

    pub fn head(&self) -> &HeadParams<f32> {
        &self.head
    }

    pub fn supports(&self) -> &[Vec<SupportEntry>] {
        &self.supports
    }

    pub fn prototypes(&self) -> &Matrix<f32> {
        &self.prototypes
    }

    pub fn prototype(&self, k: usize) -> Vec<f32> {
        self.prototypes.column(k)
    }

    fn recompute_prototypes(&mut self) {
        let dim = self.prototypes.rows();
        for (k, set) in self.supports.iter().enumerate() {
            let n = set.len() as f32;
            let mut c = vec![0.0f32; dim];
            for e in set {
                for (acc, &x) in c.iter_mut().zip(&e.feature) {
                    *acc += x;
                }
            }
            for (h, v) in c.into_iter().enumerate() {
                self.prototypes.set(h, k, v / n);
            }
        }
    }

    fn trunk_and_base(&self, z: &Matrix<f32>) -> Result<(Matrix<f32>, Matrix<f32>)> {
        let (logits, cache) = head_forward(&self.head, z, Mode::Eval)?;
        Ok((cache.hidden().clone(), softmax(&logits)?))
    }

    fn adjusted_probs(&self, hidden: &Matrix<f32>) -> Result<Matrix<f32>> {
        if hidden.cols() != self.prototypes.rows() {
            return Err(Error::shape("t3a predict", self.prototypes.rows(), hidden.cols()));
        }
        softmax(&hidden.matmul(&self.prototypes)?)
    }

    /// `softmax(h · c_k)` with the current prototypes; no state change.
    pub fn predict(&self, z: &Matrix<f32>) -> Result<Matrix<f32>> {
        let (hidden, _) = self.trunk_and_base(z)?;
        self.adjusted_probs(&hidden)
    }

    /// Insert each sample under its base-classifier label, keep the
    /// `filter_k` lowest-entropy entries per class, recompute prototypes and
    /// predict the batch with them.
    pub fn update_and_predict(&mut self, z: &Matrix<f32>, batch: usize) -> Result<(Matrix<f32>, BatchDiagnostics)> {
        let (hidden, base) = self.trunk_and_base(z)?;
        let labels = base.argmax_rows();
        let entropies = row_entropies(&base);
        for (i, (&y, &ent)) in labels.iter().zip(&entropies).enumerate() {
            self.supports[y].push(SupportEntry {
                feature: hidden.row(i).to_vec(),
                entropy: ent,
                anchor: false,
                seq: self.next_seq,
            });
            self.next_seq += 1;
        }
        let keep = self.filter_k;
        for set in &mut self.supports {
            set.sort_by(|a, b| {
                b.anchor
                    .cmp(&a.anchor)
                    .then(a.entropy.total_cmp(&b.entropy))
                    .then(a.seq.cmp(&b.seq))
            });
            let anchors = set.iter().filter(|e| e.anchor).count();
            set.truncate(keep.max(anchors));
        }
        self.recompute_prototypes();
        let probs = self.adjusted_probs(&hidden)?;
        let diag = BatchDiagnostics {
            support_sizes: self.supports.iter().map(Vec::len).collect(),
            ..BatchDiagnostics::from_probs(batch, &probs)
        };
        Ok((probs, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn state(filter_k: usize) -> T3aState {
        let head = HeadParams::<f32>::init(4, 3, 6, &mut Rng::new(3));
        T3aState::new(head, T3aConfig { filter_k }).unwrap()
    }

    #[test]
    fn init_prototypes_are_class_weights() {
        let st = state(20);
        for k in 0..3 {
            assert_eq!(st.prototype(k), st.head.class_weight(k));
            assert_eq!(st.supports[k].len(), 1);
        }
    }

    #[test]
    fn one_insert_averages_with_anchor() {
        let mut st = state(20);
        let z = Matrix::from_fn(1, 4, |_, c| c as f32 * 0.5 - 0.7);
        let (hidden, base) = st.trunk_and_base(&z).unwrap();
        let y = base.argmax_rows()[0];
        st.update_and_predict(&z, 0).unwrap();
        let w = st.head.class_weight(y);
        for (h, c) in st.prototype(y).iter().enumerate() {
            assert!((c - (w[h] + hidden.get(0, h)) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn filter_one_keeps_only_anchor() {
        let mut st = state(1);
        let z = Matrix::from_fn(2, 4, |r, c| (r * 4 + c) as f32 * 0.1);
        st.update_and_predict(&z, 0).unwrap();
        for set in st.supports() {
            assert_eq!(set.len(), 1);
            assert!(set[0].anchor);
        }
    }

    #[test]
    fn zero_filter_is_config_error() {
        let head = HeadParams::<f32>::init(4, 3, 6, &mut Rng::new(3));
        assert!(matches!(
            T3aState::new(head, T3aConfig { filter_k: 0 }),
            Err(Error::Config(_))
        ));
    }
}
