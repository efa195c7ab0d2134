//! Source-free adaptation of the pre-classifier layers with information
//! maximization plus centroid pseudo-labels; the classifier stays fixed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::BatchDiagnostics;
use crate::model::{head_backward, head_forward, Encoder, HeadParams, Mode, ParamSubset};
use crate::numerics::{cross_entropy, mean_entropy, sgd_momentum_step, softmax, Matrix, OptimizerState, SgdHyper};
use crate::shiftbench::UnlabeledBatch;
use crate::{Error, Result};

fn default_lr() -> f64 {
    1e-4
}
fn default_wd() -> f64 {
    1e-4
}
fn default_steps() -> usize {
    1
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Weight on the mean prediction entropy.
    #[serde(default = "one")]
    pub ent_weight: f64,
    /// Weight on the diversity term `Σ p̂_k log p̂_k`.
    #[serde(default = "one")]
    pub mi_weight: f64,
    /// β, weight on the pseudo-label cross-entropy.
    #[serde(default = "one")]
    pub pl_weight: f64,
}

impl Default for ShotConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
            momentum: 0.0,
            steps: default_steps(),
            ent_weight: 1.0,
            mi_weight: 1.0,
            pl_weight: 1.0,
        }
    }
}

impl ShotConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.ent_weight, self.mi_weight, self.pl_weight];
        if w.iter().any(|v| v.is_nan() || *v < 0.0) || self.lr.is_nan() || self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "SHOT weights, lr and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotLossTerms {
    pub ent: f64,
    pub div: f64,
    pub pl: f64,
    pub total: f64,
}

/// `ent_weight·L_ent + mi_weight·L_div + β·L_PL` and its gradient w.r.t. the
/// logits, where `L_div = Σ_k p̂_k log p̂_k` over the batch-mean prediction.
pub fn shot_loss(logits: &Matrix<f64>, pseudo: &[usize], config: &ShotConfig) -> Result<(ShotLossTerms, Matrix<f64>)> {
    let (b, k) = logits.shape();
    if b == 0 {
        return Err(Error::Data("SHOT loss over an empty batch".into()));
    }
    let probs = softmax(logits)?;
    let (ent, dent) = mean_entropy(logits)?;
    let (pl, dpl) = cross_entropy(logits, pseudo)?;

    let bf = b as f64;
    let mut p_hat = vec![0.0f64; k];
    for r in 0..b {
        for (acc, &p) in p_hat.iter_mut().zip(probs.row(r)) {
            *acc += p;
        }
    }
    p_hat.iter_mut().for_each(|v| *v /= bf);
    let log_p_hat: Vec<f64> = p_hat
        .iter()
        .map(|&v| if v > 0.0 { libm::log(v) } else { 0.0 })
        .collect();
    let div: f64 = p_hat.iter().zip(&log_p_hat).map(|(p, l)| p * l).sum();

    // dL_div/dl_ij = p_ij (log p̂_j − Σ_k p_ik log p̂_k) / B
    let mut grad = Matrix::zeros(b, k);
    for r in 0..b {
        let p = probs.row(r);
        let mix: f64 = p.iter().zip(&log_p_hat).map(|(a, l)| a * l).sum();
        let g = grad.row_mut(r);
        for j in 0..k {
            g[j] = config.mi_weight * p[j] * (log_p_hat[j] - mix) / bf
                + config.ent_weight * dent.get(r, j)
                + config.pl_weight * dpl.get(r, j);
        }
    }
    let total = config.ent_weight * ent + config.mi_weight * div + config.pl_weight * pl;
    Ok((ShotLossTerms { ent, div, pl, total }, grad))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Nearest valid centroid by cosine distance. Near-ties (within 1e-12) go to
/// the class the model itself finds most probable, then the lower index.
fn assign(features: &Matrix<f64>, probs: &Matrix<f64>, centroids: &[Option<Vec<f64>>]) -> Vec<usize> {
    (0..features.rows())
        .map(|i| {
            let z = features.row(i);
            let mut best: Option<(usize, f64)> = None;
            for (k, c) in centroids.iter().enumerate() {
                let Some(c) = c else { continue };
                let d = cosine_distance(z, c);
                best = match best {
                    None => Some((k, d)),
                    Some((bk, bd)) => {
                        if d < bd - 1e-12 || ((d - bd).abs() <= 1e-12 && probs.get(i, k) > probs.get(i, bk)) {
                            Some((k, d))
                        } else {
                            Some((bk, bd))
                        }
                    }
                };
            }
            best.map_or(0, |(k, _)| k)
        })
        .collect()
}

/// Two-round centroid pseudo-labeling: soft centroids weighted by the
/// predicted probabilities, nearest-centroid assignment, then hard centroids
/// from that assignment and a second assignment.
pub fn shot_pseudo_labels(features: &Matrix<f32>, probs: &Matrix<f32>) -> Result<Vec<usize>> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::Data("pseudo-labeling needs at least one target sample".into()));
    }
    if probs.rows() != n {
        return Err(Error::shape("shot_pseudo_labels", n, probs.rows()));
    }
    let z = features.cast::<f64>();
    let p = probs.cast::<f64>();
    let (d, k) = (z.cols(), p.cols());

    let mut soft: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    for c in 0..k {
        let weight: f64 = (0..n).map(|i| p.get(i, c)).sum();
        if weight <= 0.0 {
            soft.push(None);
            continue;
        }
        let mut mu = vec![0.0; d];
        for i in 0..n {
            let w = p.get(i, c);
            for (m, &x) in mu.iter_mut().zip(z.row(i)) {
                *m += w * x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= weight);
        soft.push(Some(mu));
    }
    let first = assign(&z, &p, &soft);

    let mut hard: Vec<Option<Vec<f64>>> = vec![None; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in first.iter().enumerate() {
        let mu = hard[c].get_or_insert_with(|| vec![0.0; d]);
        for (m, &x) in mu.iter_mut().zip(z.row(i)) {
            *m += x;
        }
        counts[c] += 1;
    }
    for (mu, &cnt) in hard.iter_mut().zip(&counts) {
        if let Some(mu) = mu {
            mu.iter_mut().for_each(|m| *m /= cnt as f64);
        }
    }
    Ok(assign(&z, &p, &hard))
}

#[derive(Debug, Clone)]
pub struct ShotState {
    pub(crate) head: HeadParams<f32>,
    config: ShotConfig,
    opt: OptimizerState<f32>,
    pseudo_labels: Vec<usize>,
}

impl ShotState {
    pub fn new(head: HeadParams<f32>, config: ShotConfig) -> Result<Self> {
        config.validate()?;
        let lens = head.tensor_lens();
        Ok(Self {
            opt: OptimizerState::sgd_momentum(&lens[..4]),
            head,
            config,
            pseudo_labels: Vec::new(),
        })
    }

    pub fn head(&self) -> &HeadParams<f32> {
        &self.head
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.pseudo_labels
    }

    fn sgd(&self) -> SgdHyper {
        SgdHyper {
            lr: self.config.lr,
            momentum: self.config.momentum,
            weight_decay: self.config.weight_decay,
        }
    }

    /// Full pass over the target set for pseudo-labels, then one pass of
    /// per-batch gradient steps on γ, β, W1, b1.
    pub fn adapt(
        &mut self,
        encoder: &Encoder,
        target: &UnlabeledBatch,
        batch_size: usize,
        mut trace: Option<&mut dyn FnMut(&BatchDiagnostics)>,
    ) -> Result<()> {
        if target.is_empty() {
            return Err(Error::Data("SHOT needs a non-empty target set".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let z = encoder.encode(target)?.z;
        let (logits, cache) = head_forward(&self.head, &z, Mode::Eval)?;
        let probs = softmax(&logits)?;
        self.pseudo_labels = shot_pseudo_labels(cache.hidden(), &probs)?;

        let hyper = self.sgd();
        let n = z.rows();
        for (batch, start) in (0..n).step_by(batch_size).enumerate() {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            let zb = z.select_rows(&idx);
            let pseudo = &self.pseudo_labels[start..start + idx.len()];
            let mut terms = None;
            for _ in 0..self.config.steps {
                let (logits, cache) = head_forward(&self.head, &zb, Mode::Eval)?;
                let (t, dlogits) = shot_loss(&logits.cast::<f64>(), pseudo, &self.config)?;
                if !t.total.is_finite() {
                    return Err(Error::Adaptation {
                        batch,
                        reason: format!("non-finite SHOT loss {}", t.total),
                    });
                }
                terms.get_or_insert(t);
                let g = head_backward(&self.head, &cache, &dlogits.cast::<f32>(), ParamSubset::AdapterOnly)?;
                let HeadParams {
                    ln_gamma,
                    ln_beta,
                    w1,
                    b1,
                    ..
                } = &mut self.head;
                sgd_momentum_step(
                    &mut [&mut ln_gamma[..], &mut ln_beta[..], w1.as_mut_slice(), &mut b1[..]],
                    &[&g.ln_gamma, &g.ln_beta, g.w1.as_slice(), &g.b1],
                    &mut self.opt,
                    &hyper,
                )?;
            }
            if let Some(sink) = trace.as_mut() {
                let (logits, _) = head_forward(&self.head, &zb, Mode::Eval)?;
                let mut d = BatchDiagnostics::from_probs(batch, &softmax(&logits)?);
                if let Some(t) = terms {
                    d.loss = Some(t.total);
                    d.loss_terms = Some(t);
                }
                sink(&d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{entropy, Rng};

    #[test]
    fn diversity_term_extremes() {
        // K = 2, rows (a, b) and (b, a) -> uniform marginal
        let logits = Matrix::from_vec(2, 2, vec![2.0, -1.0, -1.0, 2.0]).unwrap();
        let cfg = ShotConfig::default();
        let (t, _) = shot_loss(&logits, &[0, 1], &cfg).unwrap();
        assert!((t.div + 2.0f64.ln()).abs() < 1e-12);
        // collapsed: all mass on class 0
        let logits = Matrix::from_vec(3, 2, vec![800.0, 0.0, 800.0, 0.0, 800.0, 0.0]).unwrap();
        let (t, _) = shot_loss(&logits, &[0, 0, 0], &cfg).unwrap();
        assert_eq!(t.div, 0.0);
        assert_eq!(t.ent, 0.0);
    }

    #[test]
    fn uniform_marginal_is_global_minimum_of_div() {
        let mut rng = Rng::new(8);
        let k = 4;
        let floor = -(k as f64).ln();
        for _ in 0..500 {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-12).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let div = -entropy(&p);
            assert!(div >= floor - 1e-12);
        }
    }

    #[test]
    fn pseudo_labels_single_and_degenerate() {
        let z = Matrix::from_vec(1, 3, vec![0.3f32, -1.0, 2.0]).unwrap();
        let p = Matrix::from_vec(1, 3, vec![0.2f32, 0.5, 0.3]).unwrap();
        assert_eq!(shot_pseudo_labels(&z, &p).unwrap(), vec![1]);
        let z = Matrix::from_fn(6, 3, |_, c| c as f32 + 1.0);
        let p = Matrix::from_fn(6, 2, |_, c| if c == 0 { 0.35 } else { 0.65 });
        assert_eq!(shot_pseudo_labels(&z, &p).unwrap(), vec![1; 6]);
        assert!(shot_pseudo_labels(&Matrix::zeros(0, 3), &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn zero_weight_class_is_skipped() {
        let z = Matrix::from_fn(4, 2, |r, c| if (r < 2) == (c == 0) { 1.0f32 } else { 0.0 });
        let p = Matrix::from_fn(4, 3, |r, c| match (r < 2, c) {
            (true, 0) | (false, 1) => 0.9f32,
            (_, 2) => 0.0,
            _ => 0.1,
        });
        let labels = shot_pseudo_labels(&z, &p).unwrap();
        assert_eq!(labels, vec![0, 0, 1, 1]);
    }
}
