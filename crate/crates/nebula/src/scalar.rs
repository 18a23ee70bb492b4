//! Scalar abstraction for the dense linear-algebra kernels.
//!
//! The matrix and factorization code is generic over [`Scalar`] so the same
//! kernels run in `f32` or `f64`. The rest of the crate uses the concrete
//! `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by the matrix and factorization kernels.
pub trait Scalar:
    'static
    + Float
    + FromPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
{
    /// Lossy conversion to `f64`, used only for diagnostics and error reports.
    fn as_f64(self) -> f64;

    /// Conversion from `f64` constants (tolerances, literals).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}
