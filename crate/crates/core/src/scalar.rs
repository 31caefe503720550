//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Real floating-point scalar the inference code is generic over.
///
/// Implemented for `f32` and `f64`. Tolerances that are stated as absolute
/// numbers (1e-12 residual targets and the like) are clamped from below by a
/// small multiple of the type's machine epsilon, see [`Scalar::tol`].
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Convert an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Lossy conversion to `f64` for reporting and serialization.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `max(requested, 64 * eps)` so that f64 tolerances stay meaningful in f32.
    #[inline]
    fn tol(requested: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(64.0);
        let r = Self::lit(requested);
        if r > floor {
            r
        } else {
            floor
        }
    }
}

impl Scalar for f64 {}
impl Scalar for f32 {}
