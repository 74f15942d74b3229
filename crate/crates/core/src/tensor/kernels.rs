//! Plain-slice kernels shared by the graph ops. Row-major throughout.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    unsafe { T::gemm_acc(m, k, n, a.as_ptr(), k_, 1, b.as_ptr(), n_, 1, out.as_mut_ptr(), n_, 1) }
}

/// `out[k×n] += aᵀ · g` with `a[m×k]`, `g[m×n]`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], g: &[T], out: &mut [T]) {
    assert!(a.len() == m * k && g.len() == m * n && out.len() == k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    unsafe { T::gemm_acc(k, m, n, a.as_ptr(), 1, k_, g.as_ptr(), n_, 1, out.as_mut_ptr(), n_, 1) }
}

/// `out[m×k] += g[m×n] · bᵀ` with `b[k×n]`.
pub fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, g: &[T], b: &[T], out: &mut [T]) {
    assert!(g.len() == m * n && b.len() == k * n && out.len() == m * k);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    unsafe { T::gemm_acc(m, n, k, g.as_ptr(), n_, 1, b.as_ptr(), 1, n_, out.as_mut_ptr(), k_, 1) }
}

pub fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Inner tanh of the GELU approximation, shared by value and derivative.
#[inline]
pub fn gelu_tanh<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    // one exp instead of libm tanh; saturates cleanly to ±1
    T::one() - T::of(2.0) / ((u + u).exp() + T::one())
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    gelu_from_tanh(x, gelu_tanh(x))
}

#[inline]
pub fn gelu_from_tanh<T: Real>(x: T, t: T) -> T {
    T::of(0.5) * x * (T::one() + t)
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

#[inline]
pub fn gelu_grad_from_tanh<T: Real>(x: T, t: T) -> T {
    let half = T::of(0.5);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Max-subtracted softmax of one strided lane, written into `out`.
pub fn softmax_lane<T: Real>(x: &[T], out: &mut [T], len: usize, stride: usize, base: usize) {
    let mut mx = T::neg_infinity();
    for t in 0..len {
        mx = mx.max(x[base + t * stride]);
    }
    let mut sum = T::zero();
    for t in 0..len {
        let e = (x[base + t * stride] - mx).exp();
        out[base + t * stride] = e;
        sum += e;
    }
    for t in 0..len {
        out[base + t * stride] /= sum;
    }
}

pub fn log_softmax_lane<T: Real>(x: &[T], out: &mut [T], len: usize, stride: usize, base: usize) {
    let mut mx = T::neg_infinity();
    for t in 0..len {
        mx = mx.max(x[base + t * stride]);
    }
    let mut sum = T::zero();
    for t in 0..len {
        sum += (x[base + t * stride] - mx).exp();
    }
    let lse = mx + sum.ln();
    for t in 0..len {
        out[base + t * stride] = x[base + t * stride] - lse;
    }
}

/// Splits a shape around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
