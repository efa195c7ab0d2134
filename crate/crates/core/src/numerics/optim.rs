//! AdamW and SGD-with-momentum over a list of flat parameter tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    SgdMomentum,
}

/// Moment buffers mirroring the parameter tensors one-to-one.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    kind: OptimizerKind,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn adamw(shapes: &[usize]) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            first: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            second: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            step: 0,
        }
    }

    pub fn sgd_momentum(shapes: &[usize]) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            first: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Velocity (SGD) or first moment (AdamW) buffers.
    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    fn check(&self, kind: OptimizerKind, params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Contract(format!(
                "optimizer state is {:?}, not {kind:?}",
                self.kind
            )));
        }
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} tensors", self.first.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, buf) in self.first.iter().enumerate() {
            if params[i].len() != buf.len() || grads[i].len() != buf.len() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("tensor {i} of length {}", buf.len()),
                    format!("{} / {}", params[i].len(), grads[i].len()),
                ));
            }
        }
        Ok(())
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    hyper: &AdamWHyper,
) -> Result<()> {
    state.check(OptimizerKind::AdamW, params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let lr = T::from_f64(hyper.lr);
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let eps = T::from_f64(hyper.eps);
    let decay = T::from_f64(1.0 - hyper.lr * hyper.weight_decay);
    let bc1 = T::from_f64(1.0 - libm::pow(hyper.beta1, f64::from(t)));
    let bc2 = T::from_f64(1.0 - libm::pow(hyper.beta2, f64::from(t)));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            p[j] *= decay;
            m[j] = b1 * m[j] + (T::ONE - b1) * g[j];
            v[j] = b2 * v[j] + (T::ONE - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `v <- momentum·v + g + wd·w; w <- w - lr·v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    hyper: &SgdHyper,
) -> Result<()> {
    state.check(OptimizerKind::SgdMomentum, params, grads)?;
    state.step += 1;
    let lr = T::from_f64(hyper.lr);
    let mu = T::from_f64(hyper.momentum);
    let wd = T::from_f64(hyper.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let v = &mut state.first[i];
        for j in 0..p.len() {
            v[j] = mu * v[j] + g[j] + wd * p[j];
            p[j] -= lr * v[j];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam_once(w: f64, g: f64, hyper: AdamWHyper) -> f64 {
        let mut p = [w];
        let mut st = OptimizerState::<f64>::adamw(&[1]);
        adamw_step(&mut [&mut p[..]], &[&[g][..]], &mut st, &hyper).unwrap();
        p[0]
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let h = AdamWHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(adam_once(0.7, 0.0, h), 0.7);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let h = AdamWHyper {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let expected = 1.0 - 1e-3 * (0.5 / (0.5 + 1e-8));
        assert!((adam_once(1.0, 0.5, h) - expected).abs() < 1e-15);
        assert!((adam_once(1.0, 0.5, h) - 0.999).abs() < 1e-9);
    }

    #[test]
    fn adamw_pure_decay() {
        let h = AdamWHyper {
            lr: 1e-3,
            weight_decay: 0.1,
            ..Default::default()
        };
        assert!((adam_once(2.0, 0.0, h) - 2.0 * (1.0 - 1e-4)).abs() < 1e-15);
    }

    fn sgd(w: f64, v0: f64, grads: &[f64], hyper: SgdHyper) -> f64 {
        let mut p = [w];
        let mut st = OptimizerState::<f64>::sgd_momentum(&[1]);
        st.first[0][0] = v0;
        for &g in grads {
            sgd_momentum_step(&mut [&mut p[..]], &[&[g][..]], &mut st, &hyper).unwrap();
        }
        p[0]
    }

    #[test]
    fn sgd_examples() {
        let h = SgdHyper {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!((sgd(1.0, 0.0, &[1.0], h) - 0.9).abs() < 1e-15);
        assert!((sgd(1.0, 1.0, &[0.0], h) - (1.0 - 0.1 * 0.9)).abs() < 1e-15);
        // unrolled: v1 = 1, v2 = 0.9 + 1 = 1.9
        assert!((sgd(0.0, 0.0, &[1.0, 1.0], h) + 0.1 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn step_counter_and_shape_errors() {
        let mut st = OptimizerState::<f32>::sgd_momentum(&[2]);
        let mut p = [0.0f32; 2];
        let h = SgdHyper {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_momentum_step(&mut [&mut p[..]], &[&[1.0, 1.0][..]], &mut st, &h).unwrap();
        sgd_momentum_step(&mut [&mut p[..]], &[&[1.0, 1.0][..]], &mut st, &h).unwrap();
        assert_eq!(st.step_count(), 2);
        let mut q = [0.0f32; 3];
        assert!(sgd_momentum_step(&mut [&mut q[..]], &[&[1.0; 3][..]], &mut st, &h).is_err());
        let ah = AdamWHyper::default();
        assert!(matches!(
            adamw_step(&mut [&mut p[..]], &[&[1.0, 1.0][..]], &mut st, &ah),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // loss = 0.5 (w - 3)^2, grad = w - 3
        let mut w = [10.0f64];
        let mut st = OptimizerState::adamw(&[1]);
        let h = AdamWHyper {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let loss = 0.5 * (w[0] - 3.0).powi(2);
            assert!(loss < prev);
            prev = loss;
            let g = [w[0] - 3.0];
            adamw_step(&mut [&mut w[..]], &[&g[..]], &mut st, &h).unwrap();
        }
        let mut w = [10.0f64];
        let mut st = OptimizerState::sgd_momentum(&[1]);
        let h = SgdHyper {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let loss = 0.5 * (w[0] - 3.0).powi(2);
            assert!(loss < prev || loss == 0.0);
            prev = loss;
            let g = [w[0] - 3.0];
            sgd_momentum_step(&mut [&mut w[..]], &[&g[..]], &mut st, &h).unwrap();
        }
    }
}
