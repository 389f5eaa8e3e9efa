use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar the quantization math is generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossless widening for accumulation.
    fn widen(self) -> f64;

    /// Narrowing from an `f64` accumulator, rounding to nearest.
    fn narrow(v: f64) -> Self;

    /// Distance to the next representable value away from zero.
    fn ulp(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }

    fn ulp(self) -> Self {
        let a = self.abs();
        if !a.is_finite() {
            return f32::NAN;
        }
        f32::from_bits(a.to_bits() + 1) - a
    }
}

impl Real for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }

    fn ulp(self) -> Self {
        let a = self.abs();
        if !a.is_finite() {
            return f64::NAN;
        }
        f64::from_bits(a.to_bits() + 1) - a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ulp_of_one() {
        assert_eq!(1.0f32.ulp(), f32::EPSILON);
        assert_eq!(1.0f64.ulp(), f64::EPSILON);
        assert_eq!((-1.0f32).ulp(), f32::EPSILON);
        assert!(0.0f32.ulp() > 0.0);
    }
}
