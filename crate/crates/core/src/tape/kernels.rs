//! Row-major dense kernels. All of them accumulate into `c`. Products go
//! through a blocked gemm, which is single-threaded and so deterministic for
//! a given machine; `dot` fixes its own summation order.

use alloc::vec::Vec;

use crate::real::{Real, View};

#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight fixed partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        let (pa, pb) = (&a[base..base + 8], &b[base..base + 8]);
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    T::gemm_acc(m, k, n, View::row_major(a, k), View::row_major(b, n), c, n);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    T::gemm_acc(m, k, n, View::row_major(a, k), View::transposed(b, k), c, n);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    T::gemm_acc(k, m, n, View::transposed(a, k), View::row_major(b, n), c, n);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `tanh(x) = 1 − 2 / (1 + e^{2x})`, exact at both saturated ends.
pub fn tanh_in_place<T: Real>(xs: &mut [T]) {
    let two = T::from_f64(2.0);
    for x in xs.iter_mut() {
        *x *= two;
    }
    T::exp_in_place(xs);
    for x in xs.iter_mut() {
        *x = T::one() - two / (T::one() + *x);
    }
}

/// GELU with the tanh approximation. Returns the outputs and the tanh
/// values, which the derivative reuses.
pub fn gelu_forward<T: Real>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let mut t: Vec<T> = x.iter().map(|&v| c * (v + a * v * v * v)).collect();
    tanh_in_place(&mut t);
    let out = x.iter().zip(&t).map(|(&v, &ti)| half * v * (T::one() + ti)).collect();
    (out, t)
}

/// d gelu / dx at `x`, given `t = tanh(√(2/π)(x + 0.044715x³))`.
#[inline]
pub fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    for v in row.iter_mut() {
        *v -= max;
    }
    T::exp_in_place(row);
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
