//! Floating-point scalar abstraction: f32 for storage/training, f64 for
//! gradient-check mode.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type every numeric kernel is generic over.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
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
