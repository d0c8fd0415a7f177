//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numeric code is generic over.
///
/// Implemented for `f32` and `f64`. Training and gradient checks are meant to
/// run in `f64`; `f32` is supported for inference and memory-bound use.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Clamp margin used to keep logarithms of probabilities finite.
    ///
    /// `1e-12` in `f64`; widened to machine epsilon for narrower types so that
    /// `1 - eps` stays below one.
    #[inline]
    fn prob_eps() -> Self {
        let e = Self::lit(1e-12);
        if e > Self::epsilon() {
            e
        } else {
            Self::epsilon()
        }
    }

    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob_eps_keeps_one_minus_eps_below_one() {
        assert!(1.0f32 - f32::prob_eps() < 1.0);
        assert!(1.0f64 - f64::prob_eps() < 1.0);
        assert_eq!(f64::prob_eps(), 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        assert!(800.0f64.sigmoid() <= 1.0);
        assert!((-800.0f64).sigmoid() >= 0.0);
        assert!((-800.0f64).sigmoid().is_finite());
    }
}
