//! Scalar abstraction for the numeric core.
//!
//! Everything below the experiment layer is generic over [`Scalar`] so the
//! same kernels run in `f32` or `f64`. The crate-root aliases pin the
//! experiment layer to `f64`, which the verification tolerances require.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable inside tensors and the autodiff graph.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;

    /// Lossless-enough conversion from `f64` literals and RNG draws.
    fn from_f64_exact(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}
