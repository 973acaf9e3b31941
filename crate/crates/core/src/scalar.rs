//! Element type abstraction: `f64` for oracle/gradient-check paths, `f32`
//! for training paths.

use std::fmt::{Debug, Display};

/// Floating-point element type usable by every kernel in the crate.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
