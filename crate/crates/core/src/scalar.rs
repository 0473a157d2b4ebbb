//! Scalar abstraction shared by every numeric module.
//!
//! Everything numeric in the crate is generic over [`Real`], implemented for
//! `f32` (fast training mode) and `f64` (the default, used for gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// On-disk element type tag used by checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
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
    );

    fn write_le(self, out: &mut Vec<u8>);
}

/// Lossless-enough conversion from an `f64` literal.
#[inline(always)]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable")
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

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
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover every strided
                // access for the given (m, k, n) and strides; checked below in
                // debug builds for the contiguous layouts used in this crate.
                debug_assert!(a.len() >= if k == 0 { 0 } else { 1 });
                debug_assert!(b.len() >= if k == 0 { 0 } else { 1 });
                debug_assert!(!c.is_empty());
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

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_2x2<T: Real>() -> Vec<T> {
        let a: Vec<T> = [1.0, 2.0, 3.0, 4.0].iter().map(|&x| lit(x)).collect();
        let b: Vec<T> = [5.0, 6.0, 7.0, 8.0].iter().map(|&x| lit(x)).collect();
        let mut c = vec![T::zero(); 4];
        T::gemm(2, 2, 2, T::one(), &a, 2, 1, &b, 2, 1, T::zero(), &mut c, 2, 1);
        c
    }

    #[test]
    fn gemm_matches_hand_product() {
        assert_eq!(gemm_2x2::<f64>(), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(gemm_2x2::<f32>(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn dtype_codes_round_trip() {
        for d in [DType::F32, DType::F64] {
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
        assert_eq!(DType::from_code(9), None);
    }
}
