//! Activations and divergences.

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::scalar::Scalar;

/// Floor applied to `q` inside the logarithm of [`kl_divergence`].
pub const KL_Q_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax", 1, 0));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of a logit matrix, optionally tempered (`logits / temperature`).
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>, temperature: T) -> Matrix<T> {
    let mut out = if temperature == T::one() {
        logits.clone()
    } else {
        logits.scale(T::one() / temperature)
    };
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `log softmax(logits)`, evaluated without forming the probabilities.
pub(crate) fn log_softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// `KL(p ‖ q) = Σ pᵢ ln(pᵢ/qᵢ)` with `0·ln 0 = 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", p.len(), q.len()));
    }
    let floor = T::of(KL_Q_FLOOR);
    let mut acc = T::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= T::zero() {
            continue;
        }
        if qi <= T::zero() {
            return Err(Error::Divergence { index: i });
        }
        acc += pi * (pi.ln() - qi.max(floor).ln());
    }
    // Rounding can leave a tiny negative residue for p ≈ q.
    Ok(acc.max(T::zero()))
}

/// Logistic function `1 / (1 + e^{-z})`, stable for large |z|.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
