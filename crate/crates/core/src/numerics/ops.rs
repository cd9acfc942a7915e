use crate::error::{Error, Result};

use super::matrix::{dot, norm2};

/// Default norm floor used by every normalization stage.
pub const NORM_EPS: f64 = 1e-12;

/// Softmax with max subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked variant for internal hot loops; `v` must be non-empty and finite.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Vector-Jacobian product of softmax: `y ∘ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - inner)).collect()
}

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    l2_normalize_with_norm(v, eps).0
}

/// Normalizes and also returns the pre-normalization norm for the backward pass.
pub fn l2_normalize_with_norm(v: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let mut out = v.to_vec();
    let norm = l2_normalize_in_place(&mut out, eps);
    (out, norm)
}

pub(crate) fn l2_normalize_in_place(v: &mut [f64], eps: f64) -> f64 {
    let norm = norm2(v);
    let denom = norm.max(eps);
    v.iter_mut().for_each(|x| *x /= denom);
    norm
}

/// Backward of [`l2_normalize`] given its output `y` and the input norm.
///
/// Above the floor the Jacobian is `(I − y yᵀ) / ‖v‖`; below it the map is
/// the linear scaling `v / eps`.
pub fn l2_normalize_backward(y: &[f64], norm: f64, dy: &[f64], eps: f64) -> Vec<f64> {
    if norm > eps {
        let inner = dot(y, dy);
        y.iter()
            .zip(dy)
            .map(|(yi, gi)| (gi - yi * inner) / norm)
            .collect()
    } else {
        dy.iter().map(|g| g / eps).collect()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
