//! Element types the autodiff tape can run in.
//!
//! Training, attacks and analysis all use `f32`. The `f64` instantiation
//! exists so the gradient checker can evaluate finite differences without
//! 32-bit rounding swamping the difference quotient.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + Debug + Default + 'static
{
    fn of(v: f64) -> Self;
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;

    /// `c = beta * c + op(a) * op(b)`, row-major; see [`crate::linalg::gemm`].
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        n: usize,
        k: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn of_f32(v: f32) -> Self {
        v
    }

    fn as_f32(self) -> f32 {
        self
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, n: usize, k: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
        crate::linalg::gemm(m, n, k, a, ta, b, tb, beta, c)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn of_f32(v: f32) -> Self {
        v as f64
    }

    fn as_f32(self) -> f32 {
        self as f32
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(m: usize, n: usize, k: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
        crate::linalg::dgemm(m, n, k, a, ta, b, tb, beta, c)
    }
}
