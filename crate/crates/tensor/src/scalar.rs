use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type of a [`crate::Tensor`].
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Large negative sentinel written into masked attention logits.
    const MASK_FILL: Self;

    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const MASK_FILL: Self = f32::MIN;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const MASK_FILL: Self = f64::MIN;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
