//! Forward/backward kernels for the layers of the classifier head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Matrix, Real, Rng};
use crate::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    x_hat: Matrix<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

impl<T: Real> LayerNormCache<T> {
    /// Normalized activations (before the affine transform).
    pub fn normalized(&self) -> &Matrix<T> {
        &self.x_hat
    }
}

pub fn layernorm_forward<T: Real>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let (b, d) = x.shape();
    if d == 0 {
        return Err(Error::shape("layernorm_forward", "D >= 1", 0));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layernorm_forward",
            format!("gamma/beta of length {d}"),
            format!("{}/{}", gamma.len(), beta.len()),
        ));
    }
    if !eps.is_finite() || eps <= T::ZERO {
        return Err(Error::Config(format!("layernorm eps must be > 0, got {eps:?}")));
    }
    let n = T::from_usize(d);
    let mut x_hat = Matrix::zeros(b, d);
    let mut y = Matrix::zeros(b, d);
    let mut inv_std = Vec::with_capacity(b);
    for r in 0..b {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let c = v - mean;
                c * c
            })
            .sum::<T>()
            / n;
        let inv = T::ONE / (var + eps).sqrt();
        inv_std.push(inv);
        let xh = x_hat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = gamma[j] * x_hat.get(r, j) + beta[j];
        }
    }
    Ok((
        y,
        LayerNormCache {
            x_hat,
            inv_std,
            gamma: gamma.to_vec(),
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Real>(cache: &LayerNormCache<T>, dy: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Vec<T>)> {
    let (b, d) = cache.x_hat.shape();
    if dy.shape() != (b, d) {
        return Err(Error::Contract(format!(
            "layernorm_backward: cache is {b}x{d} but dy is {}x{}",
            dy.rows(),
            dy.cols()
        )));
    }
    let n = T::from_usize(d);
    let mut dx = Matrix::zeros(b, d);
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    let mut dxh = vec![T::ZERO; d];
    for r in 0..b {
        let xh = cache.x_hat.row(r);
        let g = dy.row(r);
        let mut sum_dxh = T::ZERO;
        let mut sum_dxh_xh = T::ZERO;
        for j in 0..d {
            dbeta[j] += g[j];
            dgamma[j] += g[j] * xh[j];
            dxh[j] = g[j] * cache.gamma[j];
            sum_dxh += dxh[j];
            sum_dxh_xh += dxh[j] * xh[j];
        }
        let inv = cache.inv_std[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = inv / n * (n * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    x: Matrix<T>,
    w: Matrix<T>,
}

/// `y = x·W + b` with `W` stored as `[in × out]`.
pub fn linear_forward<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<(Matrix<T>, LinearCache<T>)> {
    if x.cols() != w.rows() {
        return Err(Error::shape(
            "linear_forward",
            format!("input width {}", w.rows()),
            x.cols(),
        ));
    }
    if b.len() != w.cols() {
        return Err(Error::shape(
            "linear_forward",
            format!("bias of length {}", w.cols()),
            b.len(),
        ));
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (v, &bj) in y.row_mut(r).iter_mut().zip(b) {
            *v += bj;
        }
    }
    Ok((
        y,
        LinearCache {
            x: x.clone(),
            w: w.clone(),
        },
    ))
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Real>(cache: &LinearCache<T>, dy: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
    if dy.rows() != cache.x.rows() || dy.cols() != cache.w.cols() {
        return Err(Error::Contract(format!(
            "linear_backward: expected dy {}x{}, got {}x{}",
            cache.x.rows(),
            cache.w.cols(),
            dy.rows(),
            dy.cols()
        )));
    }
    let dx = dy.matmul(&cache.w.transpose())?;
    let dw = cache.x.transpose().matmul(dy)?;
    let mut db = vec![T::ZERO; dy.cols()];
    for r in 0..dy.rows() {
        for (acc, &g) in db.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    Ok((dx, dw, db))
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[derive(Debug, Clone)]
pub struct GeluCache<T> {
    x: Matrix<T>,
}

/// Exact (erf-based) GELU.
pub fn gelu_forward<T: Real>(x: &Matrix<T>) -> (Matrix<T>, GeluCache<T>) {
    (x.map(gelu), GeluCache { x: x.clone() })
}

pub fn gelu_backward<T: Real>(cache: &GeluCache<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    if dy.shape() != cache.x.shape() {
        return Err(Error::Contract(format!(
            "gelu_backward: cache is {:?} but dy is {:?}",
            cache.x.shape(),
            dy.shape()
        )));
    }
    let mut dx = dy.clone();
    for (g, &x) in dx.as_mut_slice().iter_mut().zip(cache.x.as_slice()) {
        *g *= gelu_grad(x);
    }
    Ok(dx)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(rng: &mut Rng, rows: usize, cols: usize, rate: f64) -> Result<Matrix<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(Matrix::from_fn(rows, cols, |_, _| T::ONE));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        if rng.uniform() < rate {
            T::ZERO
        } else {
            keep
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn layernorm_constant_row_collapses_to_beta() {
        let x = mat(1, 3, &[5.0, 5.0, 5.0]);
        let (y, _) = layernorm_forward(&x, &[1.0; 3], &[0.0; 3], LAYERNORM_EPS).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layernorm_two_point_row() {
        let x = mat(1, 2, &[1.0, -1.0]);
        let (y, _) = layernorm_forward(&x, &[1.0; 2], &[0.0; 2], 1e-5).unwrap();
        // 1 / sqrt(1 + 1e-5)
        let expected = 0.999_995_000_037_5;
        assert!((y.get(0, 0) - expected).abs() < 1e-12);
        assert!((y.get(0, 1) + expected).abs() < 1e-12);
    }

    #[test]
    fn layernorm_zero_gamma_outputs_beta() {
        let x = mat(2, 3, &[1.0, -7.0, 3.0, 0.5, 0.25, 9.0]);
        let beta = [0.1, -0.2, 0.3];
        let (y, _) = layernorm_forward(&x, &[0.0; 3], &beta, 1e-5).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &beta);
        }
    }

    #[test]
    fn layernorm_rejects_bad_shapes() {
        let x = mat(1, 3, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            layernorm_forward(&x, &[1.0; 2], &[0.0; 3], 1e-5),
            Err(Error::Shape { .. })
        ));
        let (_, cache) = layernorm_forward(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(matches!(
            layernorm_backward(&cache, &mat(2, 3, &[0.0; 6])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn layernorm_zero_upstream_and_constant_rows() {
        let x = mat(2, 3, &[4.0, 4.0, 4.0, 4.0, 4.0, 4.0]);
        let (_, cache) = layernorm_forward(&x, &[1.3, 0.2, -1.0], &[0.0; 3], 1e-5).unwrap();
        let (dx, dg, db) = layernorm_backward(&cache, &mat(2, 3, &[0.0; 6])).unwrap();
        assert!(dx.as_slice().iter().chain(&dg).chain(&db).all(|&v| v == 0.0));
        let (_, dg, _) = layernorm_backward(&cache, &mat(2, 3, &[1.0, -2.0, 0.5, 3.0, 1.0, 1.0])).unwrap();
        assert!(dg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = mat(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let (y, _) = linear_forward(&x, &Matrix::identity(3), &[0.0; 3]).unwrap();
        assert_eq!(y, x);
        let w = mat(3, 2, &[0.3, -0.1, 2.0, 0.7, 1.1, 5.0]);
        let (y, _) = linear_forward(&Matrix::zeros(2, 3), &w, &[0.5, -0.25]).unwrap();
        assert_eq!(y.as_slice(), &[0.5, -0.25, 0.5, -0.25]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        let g10 = gelu(10.0f64);
        assert!((9.999..=10.0).contains(&g10));
        // 0.5 * (1 + erf(1/sqrt 2)) = Phi(1) = 0.8413447460685429
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_and_invalid() {
        let mut rng = Rng::new(1);
        let m: Matrix<f32> = dropout_mask(&mut rng, 3, 4, 0.0).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 1.0));
        assert!(matches!(
            dropout_mask::<f32>(&mut rng, 1, 1, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            dropout_mask::<f32>(&mut rng, 1, 1, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_is_reproducible_and_unbiased() {
        let a: Matrix<f32> = dropout_mask(&mut Rng::new(5), 7, 9, 0.1).unwrap();
        let b: Matrix<f32> = dropout_mask(&mut Rng::new(5), 7, 9, 0.1).unwrap();
        assert_eq!(a, b);
        let big: Matrix<f64> = dropout_mask(&mut Rng::new(6), 1000, 1000, 0.1).unwrap();
        let mean = big.as_slice().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
