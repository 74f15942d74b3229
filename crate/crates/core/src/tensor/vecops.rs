//! Graph-free vector helpers used by evaluation and prototype maintenance.

use super::Real;
use crate::error::{Error, Result};

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Unit-norm copy of `x`; the zero vector maps to itself.
pub fn l2_normalize<T: Real>(x: &[T]) -> Vec<T> {
    let n = norm(x);
    if n > T::zero() {
        x.iter().map(|&v| v / n).collect()
    } else {
        x.to_vec()
    }
}

/// Cosine similarity, clamped to [-1, 1]. Undefined for zero-norm inputs.
pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= T::zero() || nb <= T::zero() {
        return Err(Error::Degenerate {
            op: "cosine_sim",
            detail: "zero-norm input".into(),
        });
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}
