use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors: `f32` or `f64`.
///
/// Reductions and convolutions widen to `f64` internally regardless of the
/// storage type, so `cast`/`widen` are the only conversions kernels need.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Bytes per element in memory.
    const BYTES: usize;

    fn cast(v: f64) -> Self;

    fn widen(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline(always)]
    fn cast(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline(always)]
    fn cast(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}
