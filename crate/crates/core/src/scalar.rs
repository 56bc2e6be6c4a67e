//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal or config value into this scalar.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    /// Tolerance used when checking that a vector of length `len` lies on the simplex.
    #[inline]
    fn simplex_tolerance(len: usize) -> Self {
        let scaled = Self::epsilon() * Self::lit(64.0 * len.max(1) as f64);
        scaled.max(Self::lit(1e-9))
    }
}

impl Real for f32 {}
impl Real for f64 {}
