//! Goodput-driven cluster scheduling toolkit.
//!
//! The crate models elastic deep-learning training jobs through a *goodput*
//! function (system throughput times statistical efficiency), fits that model
//! online from observed iteration times, and uses it to drive a cluster-wide
//! allocation search, baseline scheduling policies, a trace-driven discrete
//! time simulator, and a cloud autoscaling policy.
//!
//! The performance-model math in [`goodput`] is generic over the scalar type
//! (`f32` or `f64`); everything downstream uses the `f64` aliases exported
//! from the crate root.

pub mod autoscale;
pub mod fitting;
pub mod goodput;
pub mod scalar;
pub mod sched;
pub mod sim;
pub mod workload;

/// Iteration-time parameters at the default `f64` precision.
pub type ThroughputParams = goodput::ThroughputParams<f64>;
/// Goodput model at the default `f64` precision.
pub type GoodputModel = goodput::GoodputModel<f64>;
/// Learning-rate scaling rule at the default `f64` precision.
pub type LrScaleRule = goodput::LrScaleRule<f64>;

pub use goodput::{AllocationVector, BatchConfig};
