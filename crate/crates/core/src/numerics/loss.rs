//! Softmax, entropy and the losses built on them.

use alloc::format;
use alloc::vec::Vec;

use super::{Matrix, Real};
use crate::{Error, Result};

/// Row-wise softmax with max-subtraction.
pub fn softmax<T: Real>(logits: &Matrix<T>) -> Result<Matrix<T>> {
    if logits.cols() < 2 {
        return Err(Error::shape("softmax", "K >= 2", logits.cols()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Shannon entropy in nats; `0 · log 0` counts as 0.
pub fn entropy<T: Real>(probs: &[T]) -> T {
    let mut h = T::ZERO;
    for &p in probs {
        if p > T::ZERO {
            h -= p * p.ln();
        }
    }
    h
}

pub fn row_entropies<T: Real>(probs: &Matrix<T>) -> Vec<T> {
    (0..probs.rows()).map(|r| entropy(probs.row(r))).collect()
}

/// Mean prediction entropy over the batch and its gradient w.r.t. the logits.
///
/// For one row, `dH/dl_j = -p_j (log p_j + H)`.
pub fn mean_entropy<T: Real>(logits: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let probs = softmax(logits)?;
    let b = T::from_usize(probs.rows().max(1));
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut total = T::ZERO;
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let h = entropy(p);
        total += h;
        for (g, &pj) in grad.row_mut(r).iter_mut().zip(p) {
            *g = if pj > T::ZERO { -pj * (pj.ln() + h) / b } else { T::ZERO };
        }
    }
    Ok((total / b, grad))
}

/// Mean negative log-likelihood and `dlogits = (softmax - onehot) / B`.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (rows, k) = logits.shape();
    if labels.len() != rows {
        return Err(Error::shape("cross_entropy", rows, labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    let b = T::from_usize(rows.max(1));
    let mut grad = softmax(logits)?;
    let mut loss = T::ZERO;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        // log-sum-exp, shifted by the row max
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= T::ONE;
        for v in g.iter_mut() {
            *v /= b;
        }
    }
    Ok((loss / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn softmax_examples() {
        let p = softmax(&Matrix::from_vec(1, 2, vec![0.0f64, 0.0]).unwrap()).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let l: Vec<f64> = vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        let p = softmax(&Matrix::from_vec(1, 3, l).unwrap()).unwrap();
        for (got, want) in p.as_slice().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(softmax(&Matrix::<f32>::zeros(1, 1)).is_err());
    }

    #[test]
    fn softmax_shift_invariant_bitwise() {
        // logits chosen so that l + 1000 is exact in f32
        let c = softmax(&Matrix::from_vec(1, 4, vec![1000.25f32, 998.75, 1002.5, 1000.0]).unwrap()).unwrap();
        let d = softmax(&Matrix::from_vec(1, 4, vec![0.25f32, -1.25, 2.5, 0.0]).unwrap()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0f64, 1.0, 0.0]), 0.0);
        let u = [1.0f64 / 6.0; 6];
        assert!((entropy(&u) - 6.0f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.9f64, 0.1]) - 0.325_082_973_391_448_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&Matrix::<f64>::zeros(3, 4), &[0, 3, 2]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        let logits = Matrix::from_vec(1, 2, vec![100.0f64, 0.0]).unwrap();
        let (l, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(l < 1e-6);
        assert!(matches!(cross_entropy(&logits, &[2]), Err(Error::Data(_))));
    }
}
