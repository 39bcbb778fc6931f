//! Floating-point element trait.
//!
//! Training runs in `f32`; gradient-check tests instantiate the same generic
//! code with `f64` for headroom when comparing against finite differences.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type for tensors and all numerical kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn to_f64_val(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_val(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_val(self) -> f64 {
        self
    }
}
