//! Floating-point abstraction shared by every learned component.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type used by networks, schedules and losses: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, rounding to nearest for narrower types.
    fn lit(x: f64) -> Self;

    /// Widens to `f64` without loss.
    fn to_f64_lossless(self) -> f64;

    /// Gauss error function.
    fn gauss_erf(self) -> Self;

    /// Tag written into checkpoint manifests.
    const NAME: &'static str;
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }

    #[inline]
    fn gauss_erf(self) -> Self {
        libm::erf(self)
    }

    const NAME: &'static str = "f64";
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    #[inline]
    fn gauss_erf(self) -> Self {
        libm::erff(self)
    }

    const NAME: &'static str = "f32";
}

/// Converts a slice of `f64` into the target scalar type.
pub fn cast_slice<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}
