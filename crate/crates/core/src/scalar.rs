//! Floating-point element types.
//!
//! All transcendental functions go through `libm` so that results are
//! identical with and without `std`.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of a [`Tensor`](crate::Tensor): implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + Default
    + Debug
    + Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    /// Short dtype name, used in diagnostics.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;

    /// The slice as `f32` when `Self` is `f32`, for type-specific kernels.
    fn as_f32(_x: &[Self]) -> Option<&[f32]> {
        None
    }

    fn as_f32_mut(_x: &mut [Self]) -> Option<&mut [f32]> {
        None
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn sigmoid(self) -> Self {
        // Split by sign so exp never overflows.
        if self >= Self::ZERO {
            Self::ONE / (Self::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::ONE + e)
        }
    }
}

macro_rules! impl_scalar {
    ($t:tt, $name:literal, $exp:path, $ln:path, $tanh:path, $sqrt:path, $erf:path, $cos:path, $abs:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                $exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                $ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                $tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                $sqrt(self)
            }
            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }
            #[inline]
            fn cos(self) -> Self {
                $cos(self)
            }
            #[inline]
            fn abs(self) -> Self {
                $abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
            f32_views!($t);
        }
    };
}

macro_rules! f32_views {
    (f32) => {
        #[inline]
        fn as_f32(x: &[Self]) -> Option<&[f32]> {
            Some(x)
        }
        #[inline]
        fn as_f32_mut(x: &mut [Self]) -> Option<&mut [f32]> {
            Some(x)
        }
    };
    (f64) => {};
}

impl_scalar!(f32, "f32", libm::expf, libm::logf, libm::tanhf, libm::sqrtf, libm::erff, libm::cosf, libm::fabsf);
impl_scalar!(f64, "f64", libm::exp, libm::log, libm::tanh, libm::sqrt, libm::erf, libm::cos, libm::fabs);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        assert_eq!(0.0f32.sigmoid(), 0.5);
        let x = 3.7f64;
        assert!((x.sigmoid() + (-x).sigmoid() - 1.0).abs() < 1e-15);
        assert!((-1000.0f64).sigmoid() >= 0.0);
        assert_eq!(1000.0f32.sigmoid(), 1.0);
    }
}
