//! Element type abstraction: the engine runs at 64-bit for training and
//! gradient checks, 32-bit for inference.

use core::fmt::{Debug, Display};
use core::ops::AddAssign;

use num_traits::Float;

/// Floating-point element of a [`crate::Tensor`].
pub trait Scalar: Float + AddAssign + Debug + Display + Send + Sync + 'static {
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
