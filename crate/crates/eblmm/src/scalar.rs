//! Scalar abstraction: the whole crate is generic over the floating-point
//! type through [`Real`], with `f64` as the default precision.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable everywhere in this crate: f32 or f64.
pub trait Real: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy {
    /// Convert an `f64` constant into `Self`.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }

    /// Convert `Self` into `f64` (for reports and error messages).
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Convert a `usize` count into `Self`.
    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("count fits in scalar")
    }
}

impl<T> Real for T where T: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy {}
