//! The shared classifier head:
//! `LayerNorm -> Linear(hidden) -> GELU -> Dropout -> Linear(K)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::{hash_f32, Fingerprint};
use crate::numerics::{
    dropout_mask, gelu_backward, gelu_forward, layernorm_backward, layernorm_forward, linear_backward, linear_forward,
    GeluCache, LayerNormCache, LinearCache, Matrix, Real, Rng, LAYERNORM_EPS,
};
use crate::{Error, Result};

pub const HIDDEN_DIM: usize = 128;
pub const DROPOUT_RATE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = f32> {
    pub ln_gamma: Vec<T>,
    pub ln_beta: Vec<T>,
    /// `[D × hidden]`
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    /// `[hidden × K]`; column `k` is the class weight vector ω_k.
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub dropout_rate: f64,
}

/// Names of the parameter blocks, in declaration (and checkpoint) order.
pub const BLOCK_NAMES: [&str; 6] = ["ln_gamma", "ln_beta", "w1", "b1", "w2", "b2"];

impl<T: Real> HeadParams<T> {
    /// Unit LayerNorm affine and `U(-1/√fan_in, 1/√fan_in)` linear layers.
    pub fn init(feature_dim: usize, num_classes: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut uniform = |fan_in: usize| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            T::from_f64((2.0 * rng.uniform() - 1.0) * bound)
        };
        let w1 = Matrix::from_fn(feature_dim, hidden, |_, _| uniform(feature_dim));
        let b1 = (0..hidden).map(|_| uniform(feature_dim)).collect();
        let w2 = Matrix::from_fn(hidden, num_classes, |_, _| uniform(hidden));
        let b2 = (0..num_classes).map(|_| uniform(hidden)).collect();
        Self {
            ln_gamma: vec![T::ONE; feature_dim],
            ln_beta: vec![T::ZERO; feature_dim],
            w1,
            b1,
            w2,
            b2,
            dropout_rate: DROPOUT_RATE,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.ln_gamma.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn num_classes(&self) -> usize {
        self.b2.len()
    }

    /// ω_k: column `k` of the final weight matrix.
    pub fn class_weight(&self, k: usize) -> Vec<T> {
        self.w2.column(k)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, k) = (self.feature_dim(), self.hidden_dim(), self.num_classes());
        let ok = self.ln_beta.len() == d && self.w1.shape() == (d, h) && self.w2.shape() == (h, k);
        if !ok || d == 0 || h == 0 || k < 2 {
            return Err(Error::shape(
                "HeadParams",
                format!("consistent (D={d}, hidden={h}, K={k}) with K >= 2"),
                format!(
                    "w1 {:?}, w2 {:?}, beta {}",
                    self.w1.shape(),
                    self.w2.shape(),
                    self.ln_beta.len()
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::Data("head parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[T]; 6] {
        [
            &self.ln_gamma,
            &self.ln_beta,
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            &mut self.ln_gamma,
            &mut self.ln_beta,
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn tensor_lens(&self) -> [usize; 6] {
        self.tensors().map(<[T]>::len)
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        let v = |x: &[T]| x.iter().map(|&a| U::from_f64(a.to_f64())).collect::<Vec<U>>();
        HeadParams {
            ln_gamma: v(&self.ln_gamma),
            ln_beta: v(&self.ln_beta),
            w1: self.w1.cast(),
            b1: v(&self.b1),
            w2: self.w2.cast(),
            b2: v(&self.b2),
            dropout_rate: self.dropout_rate,
        }
    }
}

impl HeadParams<f32> {
    /// One fingerprint per block, in [`BLOCK_NAMES`] order.
    pub fn block_fingerprints(&self) -> [Fingerprint; 6] {
        self.tensors().map(hash_f32)
    }
}

/// Which head parameters a backward pass produces gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    AllHead,
    /// LayerNorm γ and β.
    NormAffineOnly,
    /// Everything before the classifier: γ, β, W1, b1.
    AdapterOnly,
    None,
}

impl ParamSubset {
    /// Selection mask over the blocks in [`BLOCK_NAMES`] order.
    pub fn mask(self) -> [bool; 6] {
        match self {
            ParamSubset::AllHead => [true; 6],
            ParamSubset::NormAffineOnly => [true, true, false, false, false, false],
            ParamSubset::AdapterOnly => [true, true, true, true, false, false],
            ParamSubset::None => [false; 6],
        }
    }
}

pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    ln: LayerNormCache<T>,
    l1: LinearCache<T>,
    act: GeluCache<T>,
    mask: Option<Matrix<T>>,
    hidden: Matrix<T>,
    l2: LinearCache<T>,
}

impl<T: Real> HeadCache<T> {
    /// Input to the final linear layer (after GELU and dropout).
    pub fn hidden(&self) -> &Matrix<T> {
        &self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T = f32> {
    pub ln_gamma: Vec<T>,
    pub ln_beta: Vec<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Real> HeadGrads<T> {
    pub fn zeros_like(p: &HeadParams<T>) -> Self {
        Self {
            ln_gamma: vec![T::ZERO; p.feature_dim()],
            ln_beta: vec![T::ZERO; p.feature_dim()],
            w1: Matrix::zeros(p.feature_dim(), p.hidden_dim()),
            b1: vec![T::ZERO; p.hidden_dim()],
            w2: Matrix::zeros(p.hidden_dim(), p.num_classes()),
            b2: vec![T::ZERO; p.num_classes()],
        }
    }

    pub fn tensors(&self) -> [&[T]; 6] {
        [
            &self.ln_gamma,
            &self.ln_beta,
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }
}

pub fn head_forward<T: Real>(
    params: &HeadParams<T>,
    z: &Matrix<T>,
    mode: Mode<'_>,
) -> Result<(Matrix<T>, HeadCache<T>)> {
    if z.cols() != params.feature_dim() {
        return Err(Error::shape(
            "head_forward",
            format!("features of width {}", params.feature_dim()),
            z.cols(),
        ));
    }
    let (a, ln) = layernorm_forward(z, &params.ln_gamma, &params.ln_beta, T::from_f64(LAYERNORM_EPS))?;
    let (u, l1) = linear_forward(&a, &params.w1, &params.b1)?;
    let (g, act) = gelu_forward(&u);
    let (hidden, mask) = match mode {
        Mode::Eval => (g, None),
        Mode::Train(rng) => {
            let mask = dropout_mask::<T>(rng, g.rows(), g.cols(), params.dropout_rate)?;
            let mut h = g;
            for (v, &m) in h.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= m;
            }
            (h, Some(mask))
        }
    };
    let (logits, l2) = linear_forward(&hidden, &params.w2, &params.b2)?;
    Ok((
        logits,
        HeadCache {
            ln,
            l1,
            act,
            mask,
            hidden,
            l2,
        },
    ))
}

/// Gradients of the loss behind `dlogits`; blocks outside `subset` are zero.
pub fn head_backward<T: Real>(
    params: &HeadParams<T>,
    cache: &HeadCache<T>,
    dlogits: &Matrix<T>,
    subset: ParamSubset,
) -> Result<HeadGrads<T>> {
    let mut grads = HeadGrads::zeros_like(params);
    let sel = subset.mask();
    if sel == [false; 6] {
        return Ok(grads);
    }
    let (dhidden, dw2, db2) = linear_backward(&cache.l2, dlogits)?;
    if sel[4] {
        grads.w2 = dw2;
    }
    if sel[5] {
        grads.b2 = db2;
    }
    if !(sel[0] || sel[1] || sel[2] || sel[3]) {
        return Ok(grads);
    }
    let mut dg = dhidden;
    if let Some(mask) = &cache.mask {
        for (v, &m) in dg.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= m;
        }
    }
    let du = gelu_backward(&cache.act, &dg)?;
    let (da, dw1, db1) = linear_backward(&cache.l1, &du)?;
    if sel[2] {
        grads.w1 = dw1;
    }
    if sel[3] {
        grads.b1 = db1;
    }
    if sel[0] || sel[1] {
        let (_, dgamma, dbeta) = layernorm_backward(&cache.ln, &da)?;
        if sel[0] {
            grads.ln_gamma = dgamma;
        }
        if sel[1] {
            grads.ln_beta = dbeta;
        }
    }
    Ok(grads)
}

/// Eval-mode hidden representation: `GELU(LN(z) · W1 + b1)`.
pub fn trunk_forward<T: Real>(params: &HeadParams<T>, z: &Matrix<T>) -> Result<Matrix<T>> {
    let (_, cache) = head_forward(params, z, Mode::Eval)?;
    Ok(cache.hidden)
}

/// Coordinate-wise mean of a non-empty sequence of equal-length vectors.
pub fn mean_pool<T: Real>(seq: &[&[T]]) -> Result<Vec<T>> {
    let first = seq
        .first()
        .ok_or_else(|| Error::Data("mean_pool over an empty sequence".into()))?;
    let mut acc = vec![T::ZERO; first.len()];
    for v in seq {
        if v.len() != acc.len() {
            return Err(Error::shape("mean_pool", acc.len(), v.len()));
        }
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let n = T::from_usize(seq.len());
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}
