//! Scalar abstraction over the two supported precisions.
//!
//! Pipelines default to `f32`; gradient-check builds use `f64` so the
//! central-difference oracle has headroom below its tolerance.

use core::fmt::{Debug, Display};
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of every tensor in the crate.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag, used in reports and error messages.
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Converts an `f64` literal into the active precision.
#[inline]
pub fn sc<T: Scalar>(x: f64) -> T {
    T::from(x).expect("literal representable in scalar type")
}
