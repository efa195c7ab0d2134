use serde::{Deserialize, Serialize};

use super::BatchDiagnostics;
use crate::model::{head_backward, head_forward, HeadParams, Mode, ParamSubset};
use crate::numerics::{mean_entropy, sgd_momentum_step, softmax, Matrix, OptimizerState, SgdHyper};
use crate::{Error, Result};

fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_steps() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TentConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            momentum: default_momentum(),
            steps: default_steps(),
        }
    }
}

/// Entropy minimization over the LayerNorm affine parameters, carried
/// across the whole stream.
#[derive(Debug, Clone)]
pub struct TentState {
    pub(crate) head: HeadParams<f32>,
    opt: OptimizerState<f32>,
    config: TentConfig,
    batches_seen: usize,
}

impl TentState {
    pub fn new(head: HeadParams<f32>, config: TentConfig) -> Self {
        let d = head.feature_dim();
        Self {
            head,
            opt: OptimizerState::sgd_momentum(&[d, d]),
            config,
            batches_seen: 0,
        }
    }

    pub fn head(&self) -> &HeadParams<f32> {
        &self.head
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    /// Adapt on one batch of encoder features, then predict it with the
    /// updated parameters.
    pub fn step(&mut self, z: &Matrix<f32>, batch: usize) -> Result<(Matrix<f32>, BatchDiagnostics)> {
        let hyper = SgdHyper {
            lr: self.config.lr,
            momentum: self.config.momentum,
            weight_decay: 0.0,
        };
        let mut first_loss = None;
        for _ in 0..self.config.steps {
            let (logits, cache) = head_forward(&self.head, z, Mode::Eval)?;
            let (loss, dlogits) = mean_entropy(&logits)?;
            if !loss.is_finite() {
                return Err(Error::Adaptation {
                    batch,
                    reason: alloc::format!("non-finite Tent loss {loss}"),
                });
            }
            first_loss.get_or_insert(f64::from(loss));
            let g = head_backward(&self.head, &cache, &dlogits, ParamSubset::NormAffineOnly)?;
            let HeadParams { ln_gamma, ln_beta, .. } = &mut self.head;
            sgd_momentum_step(
                &mut [&mut ln_gamma[..], &mut ln_beta[..]],
                &[&g.ln_gamma, &g.ln_beta],
                &mut self.opt,
                &hyper,
            )?;
        }
        self.batches_seen += 1;
        let (logits, _) = head_forward(&self.head, z, Mode::Eval)?;
        let probs = softmax(&logits)?;
        let diag = BatchDiagnostics {
            loss: first_loss,
            ..BatchDiagnostics::from_probs(batch, &probs)
        };
        if !probs.all_finite() {
            return Err(Error::Adaptation {
                batch,
                reason: "Tent produced non-finite predictions".into(),
            });
        }
        Ok((probs, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use alloc::vec;

    #[test]
    fn confident_batch_is_a_stationary_point() {
        let mut head = HeadParams::<f32>::init(4, 2, 8, &mut Rng::new(1));
        // huge class-0 margin through the bias: softmax saturates
        head.b2 = vec![200.0, -200.0];
        let z = Matrix::from_fn(5, 4, |r, c| (r as f32 - c as f32) * 0.3);
        let before = head.clone();
        let mut st = TentState::new(head, TentConfig::default());
        let (probs, diag) = st.step(&z, 0).unwrap();
        assert!(diag.loss.unwrap() < 1e-8);
        for (a, b) in st.head.ln_gamma.iter().zip(&before.ln_gamma) {
            assert!((a - b).abs() <= 1e-7);
        }
        assert!(probs.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let head = HeadParams::<f32>::init(3, 2, 8, &mut Rng::new(2));
        let mut st = TentState::new(
            head.clone(),
            TentConfig {
                steps: 0,
                ..Default::default()
            },
        );
        st.step(&Matrix::from_fn(4, 3, |r, c| (r + c) as f32), 0).unwrap();
        assert_eq!(st.head, head);
        assert_eq!(st.batches_seen(), 1);
    }
}
