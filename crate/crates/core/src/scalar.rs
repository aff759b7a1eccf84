//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar the array engine and the models are generic over.
///
/// Implemented for `f32` and `f64`. Verification suites run in `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c ← a·b + c` for an (m×k) `a` and (k×n) `b` given by row and
    /// column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_s: (usize, usize), b: &[Self], b_s: (usize, usize), c: &mut [Self], c_s: (usize, usize));
}

fn span(rows: usize, cols: usize, s: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.0 + (cols - 1) * s.1 + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:ident) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_s: (usize, usize), b: &[Self], b_s: (usize, usize), c: &mut [Self], c_s: (usize, usize)) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(span(m, k, a_s) <= a.len() && span(k, n, b_s) <= b.len() && span(m, n, c_s) <= c.len());
                // SAFETY: every index the kernel touches lies within the spans checked above.
                unsafe {
                    matrixmultiply::$gemm(
                        m, k, n, 1.0, a.as_ptr(), a_s.0 as isize, a_s.1 as isize, b.as_ptr(), b_s.0 as isize, b_s.1 as isize, 1.0,
                        c.as_mut_ptr(), c_s.0 as isize, c_s.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, sgemm);
impl_real!(f64, dgemm);
