//! Floating-point element types.
//!
//! Training and inference run in `f32`. The `f64` instantiation exists so the
//! finite-difference gradient checks have enough precision.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    #[inline]
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }

    /// Elementwise `exp`, overwriting `xs`.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    /// `c += a · b` for an `m×k` by `k×n` product, operands given as
    /// (row stride, column stride) views so transposes cost nothing.
    fn gemm_acc(m: usize, k: usize, n: usize, a: View<'_, Self>, b: View<'_, Self>, c: &mut [Self], ldc: usize);
}

/// A borrowed strided matrix.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> View<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

macro_rules! checked_gemm {
    ($f:path, $m:ident, $k:ident, $n:ident, $a:ident, $b:ident, $c:ident, $ldc:ident) => {{
        if $m == 0 || $n == 0 || $k == 0 {
            return;
        }
        assert!($a.fits($m, $k) && $b.fits($k, $n), "gemm operand out of bounds");
        assert!(($m - 1) * $ldc + $n <= $c.len() && $n <= $ldc, "gemm output out of bounds");
        // SAFETY: every index the kernel touches was bounds-checked above and
        // `c` is uniquely borrowed.
        unsafe {
            $f(
                $m,
                $k,
                $n,
                1.0,
                $a.data.as_ptr(),
                $a.row_stride as isize,
                $a.col_stride as isize,
                $b.data.as_ptr(),
                $b.row_stride as isize,
                $b.col_stride as isize,
                1.0,
                $c.as_mut_ptr(),
                $ldc as isize,
                1,
            )
        }
    }};
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    /// Range reduction to `2^n · e^r` with a degree-6 polynomial for `e^r`
    /// (relative error about 2e-7), written so the loop vectorizes.
    fn exp_in_place(xs: &mut [f32]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: View<'_, f32>, b: View<'_, f32>, c: &mut [f32], ldc: usize) {
        checked_gemm!(matrixmultiply::sgemm, m, k, n, a, b, c, ldc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm_acc(m: usize, k: usize, n: usize, a: View<'_, f64>, b: View<'_, f64>, c: &mut [f64], ldc: usize) {
        checked_gemm!(matrixmultiply::dgemm, m, k, n, a, b, c, ldc)
    }
}

#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = core::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5·2^23 rounds to an integer held in the low mantissa bits.
    const SHIFTER: f32 = 12_582_912.0;
    // Above 88.3 the scale 2^n would overflow before the polynomial shrinks it.
    let c = x.max(-87.3).min(88.3);
    let shifted = c * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = c - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    let bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits()).wrapping_add(127) << 23;
    let v = y * f32::from_bits(bits);
    let v = if x < -87.3 { 0.0 } else { v };
    if x.is_nan() {
        x
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0.0f64;
        let mut x = -87.0f64;
        while x < 88.0 {
            let got = exp_f32(x as f32) as f64;
            let want = (x as f32 as f64).exp();
            worst = worst.max(((got - want) / want).abs());
            x += 0.01;
        }
        assert!(worst < 5e-7, "{worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert_eq!(exp_f32(f32::NEG_INFINITY), 0.0);
        assert_eq!(exp_f32(-200.0), 0.0);
        assert!(exp_f32(f32::NAN).is_nan());
        assert!(exp_f32(88.3).is_finite());
        assert!(exp_f32(1e4).is_finite());
    }
}
