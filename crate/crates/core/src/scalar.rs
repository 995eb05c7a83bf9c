//! Scalar abstraction for the numeric core.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the numeric core is generic over.
///
/// Implemented for `f32` and `f64`. Tolerances quoted throughout the crate
/// assume `f64`; `f32` instantiations trade accuracy for size.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a literal; every constant used by this crate is representable
    /// in `f32` and `f64`.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("literal representable in Real")
    }

    /// Widens to `f64` (exact for both supported types).
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("Real widens to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
