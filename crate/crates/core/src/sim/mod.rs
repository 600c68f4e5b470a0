//! Discrete-time cluster simulator.
//!
//! Replays measured job profiles under a scheduling policy: every tick each
//! running job converts iteration time into statistical-epoch progress, agent
//! reports refit the throughput model and refresh the noise scale, and
//! scheduling rounds re-allocate GPUs (with a restart delay charged to every
//! job whose allocation changes). Optionally injects a slowdown for
//! distributed jobs sharing nodes.

mod engine;
mod metrics;
mod profiles;

pub use engine::{apply_allocations, isolated_jct, run, step, JobState, World};
pub use metrics::{
    finish_time_fairness, JobMetrics, MetricsReport, Summary, METRICS_CSV_HEADER,
};
pub use profiles::{
    builtin_library, interpolate_throughput, ModelProfile, PgnsEntry, ProfileLibrary,
    ThroughputEntry,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("job has no allocation")]
    NoAllocation,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("policy produced an infeasible allocation matrix: {0}")]
    InfeasibleMatrix(String),
    #[error("simulation exceeded {0} simulated seconds without completing")]
    TimeLimit(u64),
    #[error("missing isolated JCT for job {0:?}")]
    MissingIsolated(String),
}

/// Scheduling policy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Pollux,
    Tiresias,
    Optimus,
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pollux" => Ok(Policy::Pollux),
            "tiresias" => Ok(Policy::Tiresias),
            "optimus" => Ok(Policy::Optimus),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Policy::Pollux => "pollux",
            Policy::Tiresias => "tiresias",
            Policy::Optimus => "optimus",
        };
        f.write_str(s)
    }
}

/// Simulator configuration. Intervals are in seconds and must be positive
/// multiples of the tick length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub tick_seconds: u64,
    pub sched_interval: u64,
    pub report_interval: u64,
    pub realloc_delay: u64,
    /// Fractional slowdown injected for distributed jobs sharing a node.
    pub interference_slowdown: f64,
    pub interference_avoidance: bool,
    pub seed: u64,
    pub policy: Policy,
    pub fairness_p: f64,
    pub num_nodes: usize,
    pub gpus_per_node: u64,
    pub tiresias_threshold_gpu_hours: f64,
    /// Hard cap on simulated time; exceeding it is an error.
    pub max_sim_seconds: u64,
    /// Genetic search sizing (population, generations per round).
    pub search_population: usize,
    pub search_generations: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick_seconds: 1,
            sched_interval: 60,
            report_interval: 30,
            realloc_delay: 30,
            interference_slowdown: 0.0,
            interference_avoidance: true,
            seed: 0,
            policy: Policy::Pollux,
            fairness_p: -1.0,
            num_nodes: 16,
            gpus_per_node: 4,
            tiresias_threshold_gpu_hours: 8.0,
            max_sim_seconds: 60 * 86400,
            search_population: 100,
            search_generations: 50,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.tick_seconds == 0 {
            return Err(SimError::InvalidConfig("tick must be positive".into()));
        }
        for (name, v) in [
            ("sched_interval", self.sched_interval),
            ("report_interval", self.report_interval),
        ] {
            if v == 0 || v % self.tick_seconds != 0 {
                return Err(SimError::InvalidConfig(format!(
                    "{name} must be a positive multiple of the tick length"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.interference_slowdown) {
            return Err(SimError::InvalidConfig(
                "interference_slowdown must be in [0, 1)".into(),
            ));
        }
        if self.num_nodes == 0 || self.gpus_per_node == 0 {
            return Err(SimError::InvalidConfig("cluster must have GPUs".into()));
        }
        Ok(())
    }
}
