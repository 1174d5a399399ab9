//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Probability arithmetic is meant to run in `f64`; `f32` is supported for
/// inference and storage-precision experiments.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to Real")
    }

    /// Tolerance used when checking that a distribution over `n` cells sums to one.
    fn normalization_tolerance(n: usize) -> Self {
        let scaled = Self::epsilon() * Self::from_usize_lossy(n.max(1)) * Self::lit(16.0);
        scaled.max(Self::lit(1e-9))
    }
}

impl Real for f32 {}
impl Real for f64 {}
