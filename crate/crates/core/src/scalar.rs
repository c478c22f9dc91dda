//! Scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Floating point scalar the grid, spectral and flow code is generic over.
///
/// Implemented for `f32` and `f64`. The wire formats are always 32-bit, so
/// `f32` pipelines round-trip through files without loss.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + FftNum + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short name used in manifests ("f32" / "f64").
    const NAME: &'static str;

    /// Converts a literal; every `f64` is representable (possibly rounded).
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar converts to f32")
    }

    /// Widens a wire-format value; exact for both implementors.
    #[inline]
    fn of_f32(x: f32) -> Self {
        <Self as FromPrimitive>::from_f32(x).expect("f32 representable")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Linear interpolation in the `a + t (b - a)` form.
///
/// Exact at `t = 0` and whenever `a == b`, which keeps sampling of constant
/// fields and sampling at grid nodes free of round-off.
#[inline(always)]
pub(crate) fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}
