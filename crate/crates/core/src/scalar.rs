//! Numeric traits the reward and advantage math is generic over.
//!
//! Rewards only need field arithmetic, so they work over exact types such as
//! `num_rational::Ratio<i64>` as well as floats. Advantages divide by a
//! standard deviation and therefore require [`Scalar`], a real float.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num};

/// Anything rewards can be computed in: floats, rationals, fixed point.
pub trait RewardScalar: Num + Copy + PartialOrd + FromPrimitive + Debug {}

impl<T> RewardScalar for T where T: Num + Copy + PartialOrd + FromPrimitive + Debug {}

/// Floating point scalar for normalization and variance math (f32 or f64).
pub trait Scalar: RewardScalar + Float + Sum + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Conversion from a count.
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
