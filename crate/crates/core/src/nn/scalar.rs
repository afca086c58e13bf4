use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point element type of the network. Training runs in `f32`;
/// gradient checks run the identical code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `C ← alpha·op(A)·op(B) + beta·C` over strided matrices, where `A` is
    /// `m×k`, `B` is `k×n` and `C` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_raw(
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
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa), "lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel lies inside the
                // spans asserted above, strides are non-negative and `c` does
                // not alias `a` or `b` (distinct borrows).
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major matrix product `C ← op(A)·op(B) + beta·C`. `A` is stored as
/// `m×k` (or `k×m` when `ta`), `B` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}
