//! Scalar abstraction for the numeric core.
//!
//! Everything differentiable is generic over [`Real`] so the same code runs
//! in two precisions: `f64` for gradient checks and reference tests, `f32`
//! for training where it is roughly twice as fast on SIMD units. Only the
//! handful of primitives the kernels actually need live here; anything else
//! comes from `num_traits::Float`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the tape and all numeric kernels.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Sum + Default + Debug + Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Dense row-major matrix multiply `c = alpha * op(a) * op(b) + beta * c`
    /// where `op` transposes when the corresponding flag is set. `a` is
    /// logically `m x k` and `b` is `k x n` *after* applying `op`.
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
                assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
                assert_eq!(c.len(), m * n, "gemm: out buffer length");
                // Row-major strides; a transposed operand is the same buffer
                // with row/column strides swapped.
                let (rsa, csa) = if trans_a {
                    (1, m as isize)
                } else {
                    (k as isize, 1)
                };
                let (rsb, csb) = if trans_b {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
