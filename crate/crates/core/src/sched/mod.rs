//! Cluster-wide allocation optimization.
//!
//! The scheduler scores an allocation matrix by a generalized power mean of
//! per-job speedups (goodput relative to an exclusive fair share), penalized
//! for re-allocations, and searches for a good matrix with a population-based
//! genetic procedure. Tiresias-like and Optimus-like baseline policies share
//! the same matrix representation and feasibility rules.

mod baselines;
mod fitness;
mod search;

pub use baselines::{optimus_policy, tiresias_policy};
pub use fitness::{
    cluster_utility, fair_share, fitness, power_mean, realloc_factor, speedup, FairShare,
    FitnessEvaluator, SPEEDUP_OFFSET,
};
pub use search::{search_allocations, GeneticSearch, SearchConfig, SearchResult};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goodput::AllocationVector;
use crate::GoodputModel;

/// Resource demands and capacities, keyed by resource type ("gpu", ...).
pub type ResourceMap = BTreeMap<String, u64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error("job {job} demands resource {rtype} absent from the cluster")]
    MissingResource { job: String, rtype: String },
    #[error("allocation matrix shape does not match jobs x nodes")]
    ShapeMismatch,
    #[error("node {node} over capacity for resource {rtype}")]
    CapacityExceeded { node: usize, rtype: String },
    #[error("node {node} shared by more than one distributed job")]
    InterferenceViolation { node: usize },
    #[error("job {job} outside its replica bounds")]
    ReplicaBounds { job: String },
    #[error("job {job} spread over more than {max} nodes")]
    TooManyNodes { job: String, max: u32 },
}

/// Capacity of one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub resources: ResourceMap,
}

impl NodeSpec {
    /// A node holding `gpus` GPUs and nothing else.
    pub fn gpus(gpus: u64) -> Self {
        let mut resources = ResourceMap::new();
        resources.insert("gpu".to_string(), gpus);
        NodeSpec { resources }
    }

    pub fn capacity(&self, rtype: &str) -> u64 {
        self.resources.get(rtype).copied().unwrap_or(0)
    }
}

/// Scheduler-side view of one job.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedJobInfo {
    pub id: String,
    pub goodput_model: GoodputModel,
    pub resources_per_replica: ResourceMap,
    /// Seconds since the job was submitted.
    pub age_seconds: f64,
    /// Re-allocations incurred so far.
    pub num_restarts: u32,
    pub min_replicas: u32,
    /// Upper replica bound; the caller folds in the exploration cap.
    pub max_replicas: u32,
    /// Non-preemptible: the search must keep the current row verbatim.
    pub pinned: bool,
    pub current_allocation: AllocationVector,
    /// Whether the job has ever run; first placements of never-started jobs
    /// carry no re-allocation penalty (and no restart delay in the
    /// simulator).
    pub started: bool,
    /// Fixed GPU request for request-based baseline policies.
    pub requested_replicas: Option<u32>,
    /// Accumulated GPU-seconds, the Tiresias queue metric.
    pub attained_gpu_seconds: f64,
    /// Predicted iterations to completion, the Optimus gain metric.
    pub remaining_iterations: Option<f64>,
}

impl SchedJobInfo {
    pub fn new(id: impl Into<String>, model: GoodputModel, num_nodes: usize) -> Self {
        let mut resources = ResourceMap::new();
        resources.insert("gpu".to_string(), 1);
        SchedJobInfo {
            id: id.into(),
            goodput_model: model,
            resources_per_replica: resources,
            age_seconds: 0.0,
            num_restarts: 0,
            min_replicas: 0,
            max_replicas: u32::MAX,
            pinned: false,
            current_allocation: AllocationVector::empty(num_nodes),
            started: false,
            requested_replicas: None,
            attained_gpu_seconds: 0.0,
            remaining_iterations: None,
        }
    }
}

/// Jobs x nodes GPU assignment matrix; row `j` is job `j`'s allocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocationMatrix {
    rows: Vec<AllocationVector>,
}

impl AllocationMatrix {
    pub fn new(rows: Vec<AllocationVector>) -> Self {
        AllocationMatrix { rows }
    }

    pub fn zeros(num_jobs: usize, num_nodes: usize) -> Self {
        AllocationMatrix {
            rows: vec![AllocationVector::empty(num_nodes); num_jobs],
        }
    }

    pub fn rows(&self) -> &[AllocationVector] {
        &self.rows
    }

    pub fn row(&self, job: usize) -> &AllocationVector {
        &self.rows[job]
    }

    pub fn num_jobs(&self) -> usize {
        self.rows.len()
    }

    /// Serialize as `{job id -> [gpus per node]}`, ordered by job id.
    pub fn to_json(&self, ids: &[String]) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        for j in order {
            map.insert(
                ids[j].clone(),
                serde_json::to_value(self.rows[j].gpus_per_node()).unwrap(),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// Knobs of the fitness function and search constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessConfig {
    /// Fairness exponent of the power mean; more negative is more fair.
    pub p: f64,
    /// Estimated re-allocation delay in seconds.
    pub realloc_delay: f64,
    /// Forbid two multi-node jobs from sharing a node.
    pub interference_avoidance: bool,
    /// Hard cap on nodes per job.
    pub max_nodes_per_job: u32,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        FitnessConfig {
            p: -1.0,
            realloc_delay: 30.0,
            interference_avoidance: true,
            max_nodes_per_job: 16,
        }
    }
}

/// Check every allocation-matrix invariant: shape, node capacities, the
/// interference constraint, per-job replica bounds, and the node-spread cap.
pub fn validate_matrix(
    jobs: &[SchedJobInfo],
    nodes: &[NodeSpec],
    matrix: &AllocationMatrix,
    cfg: &FitnessConfig,
) -> Result<(), SchedError> {
    if matrix.num_jobs() != jobs.len()
        || matrix.rows().iter().any(|r| r.num_nodes() != nodes.len())
    {
        return Err(SchedError::ShapeMismatch);
    }
    for (n, node) in nodes.iter().enumerate() {
        let mut used: ResourceMap = ResourceMap::new();
        for (j, job) in jobs.iter().enumerate() {
            let replicas = u64::from(matrix.row(j).gpus_per_node()[n]);
            if replicas == 0 {
                continue;
            }
            for (rtype, demand) in &job.resources_per_replica {
                *used.entry(rtype.clone()).or_insert(0) += replicas * demand;
            }
        }
        for (rtype, total) in used {
            if total > node.capacity(&rtype) {
                return Err(SchedError::CapacityExceeded { node: n, rtype });
            }
        }
    }
    if cfg.interference_avoidance {
        let distributed: Vec<bool> = matrix
            .rows()
            .iter()
            .map(|r| r.occupied_nodes() >= 2)
            .collect();
        for n in 0..nodes.len() {
            let sharers = matrix
                .rows()
                .iter()
                .zip(&distributed)
                .filter(|(row, dist)| **dist && row.gpus_per_node()[n] > 0)
                .count();
            if sharers > 1 {
                return Err(SchedError::InterferenceViolation { node: n });
            }
        }
    }
    for (j, job) in jobs.iter().enumerate() {
        let row = matrix.row(j);
        let replicas = row.total_gpus();
        if replicas > 0 && (replicas < job.min_replicas || replicas > job.max_replicas) {
            return Err(SchedError::ReplicaBounds { job: job.id.clone() });
        }
        if row.occupied_nodes() > cfg.max_nodes_per_job {
            return Err(SchedError::TooManyNodes {
                job: job.id.clone(),
                max: cfg.max_nodes_per_job,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goodput::ThroughputParams;

    pub(crate) fn test_model(phi: f64, init: u64) -> GoodputModel {
        GoodputModel::new(
            ThroughputParams {
                alpha_grad: 0.05,
                beta_grad: 0.002,
                alpha_sync_local: 0.1,
                beta_sync_local: 0.01,
                alpha_sync_node: 0.3,
                beta_sync_node: 0.02,
                gamma: 1.8,
            },
            phi,
            init,
        )
        .with_max_batch(init * 32)
        .with_max_per_gpu_batch(128)
    }

    #[test]
    fn validator_catches_violations() {
        let nodes = vec![NodeSpec::gpus(2), NodeSpec::gpus(2)];
        let mut jobs = vec![
            SchedJobInfo::new("a", test_model(100.0, 32), 2),
            SchedJobInfo::new("b", test_model(100.0, 32), 2),
        ];
        let cfg = FitnessConfig::default();

        let ok = AllocationMatrix::new(vec![vec![2, 0].into(), vec![0, 2].into()]);
        assert!(validate_matrix(&jobs, &nodes, &ok, &cfg).is_ok());

        let over = AllocationMatrix::new(vec![vec![3, 0].into(), vec![0, 0].into()]);
        assert!(matches!(
            validate_matrix(&jobs, &nodes, &over, &cfg),
            Err(SchedError::CapacityExceeded { .. })
        ));

        // Two distributed jobs meeting on node 0.
        let interfere = AllocationMatrix::new(vec![vec![1, 1].into(), vec![1, 1].into()]);
        assert!(matches!(
            validate_matrix(&jobs, &nodes, &interfere, &cfg),
            Err(SchedError::InterferenceViolation { node: 0 })
        ));
        let relaxed = FitnessConfig {
            interference_avoidance: false,
            ..cfg
        };
        assert!(validate_matrix(&jobs, &nodes, &interfere, &relaxed).is_ok());

        jobs[0].min_replicas = 2;
        let below = AllocationMatrix::new(vec![vec![1, 0].into(), vec![0, 0].into()]);
        assert!(matches!(
            validate_matrix(&jobs, &nodes, &below, &cfg),
            Err(SchedError::ReplicaBounds { .. })
        ));
        // A zero row is always acceptable: the job is pending.
        let pending = AllocationMatrix::zeros(2, 2);
        assert!(validate_matrix(&jobs, &nodes, &pending, &cfg).is_ok());
    }

    #[test]
    fn matrix_serializes_by_job_id() {
        let m = AllocationMatrix::new(vec![vec![1, 0].into(), vec![0, 2].into()]);
        let json = m.to_json(&["b".into(), "a".into()]);
        assert_eq!(
            serde_json::to_string(&json).unwrap(),
            r#"{"a":[0,2],"b":[1,0]}"#
        );
    }
}
