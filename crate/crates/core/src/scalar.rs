//! Scalar abstraction for the numeric core.
//!
//! The tensor engine and model are generic over [`Scalar`] so the same code
//! runs in f32 or f64. Training pipelines use the f64 aliases exported at the
//! crate root; on-disk signal bodies stay f32.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point scalar: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from f64 (exact for f64 itself).
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
    fn to_f64(self) -> f64;

    /// General matrix multiply, `C ← alpha·A·B + beta·C`, with explicit
    /// element strides (rows, columns) per matrix so transposed views cost
    /// nothing. A is m×k, B is k×n, C is m×n. f32/f64 dispatch to an
    /// optimized kernel; other scalars fall back to the naive triple loop.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        let at = |i: usize, p: usize| a[(i as isize * rsa + p as isize * csa) as usize];
        let bt = |p: usize, j: usize| b[(p as isize * rsb + j as isize * csb) as usize];
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    acc += at(i, p) * bt(p, j);
                }
                let cij = &mut c[(i as isize * rsc + j as isize * csc) as usize];
                *cij = alpha * acc + if beta == Self::zero() { Self::zero() } else { beta * *cij };
            }
        }
    }
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: callers pass slices that cover every strided index in
        // [0, m) × [0, k) / [0, k) × [0, n) / [0, m) × [0, n).
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            )
        }
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            )
        }
    }
}
