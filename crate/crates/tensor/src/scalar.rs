use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of a [`Tensor`](crate::Tensor): `f32` for
/// training and inference, `f64` for gradient checking.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in diagnostics.
    const NAME: &'static str;

    /// Lossy conversion from an `f64` constant.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}
