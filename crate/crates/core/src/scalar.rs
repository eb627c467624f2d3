//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an f64 literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Lower bound applied to probabilities before taking a logarithm.
    #[inline]
    fn prob_floor() -> Self {
        Self::of(1e-12)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
