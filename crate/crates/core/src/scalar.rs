//! Floating-point scalar abstraction shared by the inference engine and the pruner.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating point element type of model tensors: `f32` or `f64`.
///
/// Weight files always store 32-bit floats; a `f64` model is widened on load
/// and narrowed on save.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f32_lossless(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f32_lossless(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f32_lossless(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}
