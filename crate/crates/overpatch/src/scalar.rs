//! Scalar abstraction over the two supported element types.
//!
//! All numeric kernels in this crate are generic over [`Scalar`]: `f32` is
//! the compute type used by the training and attack pipelines, `f64` is the
//! verification type used by the gradient-check harnesses.

use num_traits::{Float, NumAssignOps, NumCast};

/// Element type of tensors, model parameters and patch elements.
///
/// Implemented for `f32` and `f64` only; the crate root exposes concrete
/// type aliases for both.
pub trait Scalar:
    Float + NumAssignOps + NumCast + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }
    fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
