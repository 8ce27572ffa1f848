//! Floating-point scalar abstraction used by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the engine computes in. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short tag written into checkpoints ("f32" / "f64").
    const NAME: &'static str;

    /// Converts an `f64` literal or config value, rounding to nearest.
    fn lit(x: f64) -> Self;

    /// Widens to `f64` (exact for both implementors).
    fn widen(self) -> f64;

    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn lit(x: f64) -> Self {
        x
    }

    fn widen(self) -> f64 {
        self
    }
}
