//! Scalar abstraction over the two supported precisions.
//!
//! Training runs in `f32`. Gradient checking and other oracle comparisons
//! instantiate the same code at `f64`, where central finite differences are
//! trustworthy.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of every tensor in this crate.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Dtype tag used by checkpoint manifests.
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
}
