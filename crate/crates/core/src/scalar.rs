//! Scalar abstraction for the closed-form performance model.
//!
//! The goodput math is plain floating-point arithmetic, so it is written
//! against a small trait and instantiated for `f32`/`f64`. Concrete `f64`
//! aliases live at the crate root; everything downstream of the model
//! (fitting, scheduling, simulation) uses those.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + 'static {
    /// Lossy conversion from `f64` (used for constants and integer counts).
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Lossy conversion from an example count.
    fn from_u64_lossy(v: u64) -> Self {
        Self::from_u64(v).unwrap_or_else(|| Self::from_f64_lossy(v as f64))
    }
}

impl Real for f32 {}
impl Real for f64 {}
