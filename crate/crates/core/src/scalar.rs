//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating-point scalar used by matrices, eigensolvers and spectra.
///
/// Implemented for `f32` and `f64`. Production paths use `f64`; tolerances
/// written as `f64` literals are lifted through [`Real::tol`], which never
/// returns less than a small multiple of machine epsilon so that `f32`
/// instantiations stay solvable.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
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
    /// Lossless for `f64`, rounding for `f32`.
    fn of(x: f64) -> Self;

    fn of_f32(x: f32) -> Self;

    fn as_f64(self) -> f64;

    /// Nearest `f32`; values outside the `f32` range become infinite.
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }

    /// A relative tolerance, floored at `8·ε` for this scalar type.
    fn tol(x: f64) -> Self {
        let floor = Self::epsilon() * Self::of(8.0);
        Self::of(x).max(floor)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        x as f64
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tol_is_floored_for_single_precision() {
        assert_eq!(<f64 as Real>::tol(1e-12), 1e-12);
        assert!(<f32 as Real>::tol(1e-12) >= f32::EPSILON);
    }
}
