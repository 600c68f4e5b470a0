//! Closed-form model of training performance: system throughput, statistical
//! efficiency, and their product, goodput.
//!
//! A job's iteration time is decomposed into a gradient-computation term that
//! scales linearly with the per-GPU batch size and a synchronization term that
//! depends on how many GPUs are used and whether they span nodes. The two are
//! combined with a tunable overlap exponent. Statistical efficiency is driven
//! by the gradient noise scale: the larger the noise, the less progress is
//! lost to large batches. Goodput multiplies the two, giving useful examples
//! processed per second.

mod lr;
mod optimize;

pub use lr::{scale_lr, LrScaleRule};
pub use optimize::{optimize_batch_config, optimize_for_shape, MAX_ACCUM_STEPS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Errors from goodput evaluation and batch-size optimization.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GoodputError {
    /// The allocation holds no GPUs.
    #[error("no replicas")]
    NoReplicas,
    /// A batch size below the job's initial batch size was requested.
    #[error("total batch size {total} below initial batch size {init}")]
    BelowInitialBatch { total: u64, init: u64 },
    /// No (per-GPU batch, accumulation) pair satisfies the job's limits.
    #[error("infeasible batch: no configuration satisfies the batch-size limits")]
    InfeasibleBatch,
    /// The AdaScale rule needs a gradient-noise-scale estimate.
    #[error("adascale scaling requires a gradient noise scale estimate")]
    MissingPgns,
    /// Model parameters violate their bounds.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Per-node GPU counts for one job (`a`, with `a[n]` GPUs taken from node `n`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocationVector(Vec<u32>);

impl AllocationVector {
    pub fn new(gpus_per_node: Vec<u32>) -> Self {
        AllocationVector(gpus_per_node)
    }

    /// Zero GPUs on every one of `num_nodes` nodes.
    pub fn empty(num_nodes: usize) -> Self {
        AllocationVector(vec![0; num_nodes])
    }

    /// An allocation of `gpus` GPUs spread as evenly as possible over
    /// `nodes` nodes. Only the (nodes, GPUs) shape matters to the model.
    pub fn from_shape(nodes: u32, gpus: u32) -> Self {
        if nodes == 0 || gpus == 0 {
            return AllocationVector(Vec::new());
        }
        let base = gpus / nodes;
        let extra = gpus % nodes;
        AllocationVector(
            (0..nodes)
                .map(|n| base + u32::from(n < extra))
                .collect(),
        )
    }

    /// Total allocated GPUs (`K`).
    pub fn total_gpus(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Number of nodes holding at least one GPU (`N`).
    pub fn occupied_nodes(&self) -> u32 {
        self.0.iter().filter(|&&g| g > 0).count() as u32
    }

    pub fn gpus_per_node(&self) -> &[u32] {
        &self.0
    }

    pub fn is_idle(&self) -> bool {
        self.0.iter().all(|&g| g == 0)
    }

    pub fn num_nodes(&self) -> usize {
        self.0.len()
    }
}

impl From<Vec<u32>> for AllocationVector {
    fn from(v: Vec<u32>) -> Self {
        AllocationVector::new(v)
    }
}

/// Per-GPU batch size `m` and gradient accumulation steps `s`.
///
/// One optimizer step processes `m * (s + 1)` examples per GPU: `s` local
/// passes followed by one synchronized pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchConfig {
    pub per_gpu_batch: u32,
    pub accum_steps: u32,
}

impl BatchConfig {
    pub fn new(per_gpu_batch: u32, accum_steps: u32) -> Self {
        assert!(per_gpu_batch >= 1, "per-GPU batch size must be positive");
        BatchConfig {
            per_gpu_batch,
            accum_steps,
        }
    }
}

/// Total batch size `M = K * m * (s + 1)` summed across all GPUs.
pub fn total_batch_size(
    alloc: &AllocationVector,
    batch: &BatchConfig,
) -> Result<u64, GoodputError> {
    let k = u64::from(alloc.total_gpus());
    if k == 0 {
        return Err(GoodputError::NoReplicas);
    }
    Ok(k * u64::from(batch.per_gpu_batch) * (u64::from(batch.accum_steps) + 1))
}

/// The 7-tuple parameterizing the iteration-time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputParams<F> {
    /// Fixed per-pass cost in seconds.
    pub alpha_grad: F,
    /// Per-example gradient cost in seconds.
    pub beta_grad: F,
    /// Synchronization constant when all GPUs share one node.
    pub alpha_sync_local: F,
    /// Per-extra-GPU retrogression on one node.
    pub beta_sync_local: F,
    /// Synchronization constant once GPUs span nodes.
    pub alpha_sync_node: F,
    /// Per-extra-GPU retrogression across nodes.
    pub beta_sync_node: F,
    /// Overlap exponent: 1 is no overlap, large values approach max().
    pub gamma: F,
}

/// Fitting bounds for the overlap exponent.
pub const GAMMA_MIN: f64 = 1.0;
pub const GAMMA_MAX: f64 = 10.0;

impl<F: Real> ThroughputParams<F> {
    pub fn validate(&self) -> Result<(), GoodputError> {
        let coeffs = [
            self.alpha_grad,
            self.beta_grad,
            self.alpha_sync_local,
            self.beta_sync_local,
            self.alpha_sync_node,
            self.beta_sync_node,
        ];
        if coeffs.iter().any(|c| !c.is_finite() || *c < F::zero()) {
            return Err(GoodputError::InvalidParams(
                "alpha/beta coefficients must be finite and non-negative".into(),
            ));
        }
        let lo = F::from_f64_lossy(GAMMA_MIN);
        let hi = F::from_f64_lossy(GAMMA_MAX);
        if !self.gamma.is_finite() || self.gamma < lo || self.gamma > hi {
            return Err(GoodputError::InvalidParams(format!(
                "gamma {} outside [{GAMMA_MIN}, {GAMMA_MAX}]",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Time to compute one local gradient pass at per-GPU batch size `m`.
pub fn t_grad<F: Real>(params: &ThroughputParams<F>, per_gpu_batch: u32) -> F {
    params.alpha_grad + params.beta_grad * F::from_u64_lossy(u64::from(per_gpu_batch))
}

/// Time to synchronize gradients for the given placement shape.
///
/// Zero for a single GPU; the local parameters apply when all GPUs share a
/// node, the node parameters once at least two nodes are involved.
pub fn t_sync_shape<F: Real>(params: &ThroughputParams<F>, nodes: u32, gpus: u32) -> F {
    if gpus <= 1 {
        return F::zero();
    }
    let excess = F::from_u64_lossy(u64::from(gpus - 2));
    if nodes <= 1 {
        params.alpha_sync_local + params.beta_sync_local * excess
    } else {
        params.alpha_sync_node + params.beta_sync_node * excess
    }
}

/// Time to synchronize gradients under allocation `a`.
pub fn t_sync<F: Real>(params: &ThroughputParams<F>, alloc: &AllocationVector) -> F {
    t_sync_shape(params, alloc.occupied_nodes(), alloc.total_gpus())
}

/// Blend of compute and synchronization for one optimizer step:
/// the two overlap according to `gamma`.
fn overlap<F: Real>(t_grad: F, t_sync: F, gamma: F) -> F {
    let ts_pow = if t_sync == F::zero() || gamma == F::one() {
        t_sync
    } else {
        t_sync.powf(gamma)
    };
    overlap_parts(t_grad, t_sync, ts_pow, gamma)
}

/// Overlap with `t_sync^gamma` precomputed (hot path of the optimizer).
pub(crate) fn overlap_parts<F: Real>(t_grad: F, t_sync: F, ts_pow: F, gamma: F) -> F {
    if t_sync == F::zero() {
        return t_grad;
    }
    if t_grad == F::zero() {
        return t_sync;
    }
    if gamma == F::one() {
        return t_grad + t_sync;
    }
    (t_grad.powf(gamma) + ts_pow).powf(F::one() / gamma)
}

fn t_iter_parts<F: Real>(tg: F, ts: F, gamma: F, accum_steps: u32) -> F {
    F::from_u64_lossy(u64::from(accum_steps)) * tg + overlap(tg, ts, gamma)
}

/// Wall time of one training iteration: `s` accumulation passes plus one
/// synchronized pass.
pub fn t_iter<F: Real>(
    params: &ThroughputParams<F>,
    alloc: &AllocationVector,
    batch: &BatchConfig,
) -> F {
    let tg = t_grad(params, batch.per_gpu_batch);
    let ts = t_sync(params, alloc);
    t_iter_parts(tg, ts, params.gamma, batch.accum_steps)
}

/// Iteration time for a placement shape, bypassing the allocation vector.
pub fn t_iter_shape<F: Real>(
    params: &ThroughputParams<F>,
    nodes: u32,
    gpus: u32,
    batch: &BatchConfig,
) -> F {
    let tg = t_grad(params, batch.per_gpu_batch);
    let ts = t_sync_shape(params, nodes, gpus);
    t_iter_parts(tg, ts, params.gamma, batch.accum_steps)
}

/// Everything needed to evaluate a job's goodput: the throughput parameters,
/// the gradient noise scale, and the batch-size limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodputModel<F> {
    pub params: ThroughputParams<F>,
    /// Gradient noise scale estimate (clamped to be non-negative).
    pub pgns: F,
    /// The user's initial total batch size; batches never shrink below it.
    pub init_batch: u64,
    /// Optional hard cap on the total batch size.
    pub max_batch: Option<u64>,
    /// Memory cap on the per-GPU batch size.
    pub max_per_gpu_batch: u32,
    /// Fixed-batch job: efficiency is pinned to 1 and the total batch stays
    /// at `init_batch`.
    pub non_adaptive: bool,
}

impl<F: Real> GoodputModel<F> {
    pub fn new(params: ThroughputParams<F>, pgns: F, init_batch: u64) -> Self {
        GoodputModel {
            params,
            pgns: clamp_pgns(pgns),
            init_batch: init_batch.max(1),
            max_batch: None,
            max_per_gpu_batch: u32::MAX,
            non_adaptive: false,
        }
    }

    pub fn with_max_batch(mut self, max_batch: u64) -> Self {
        self.max_batch = Some(max_batch);
        self
    }

    pub fn with_max_per_gpu_batch(mut self, max_m: u32) -> Self {
        self.max_per_gpu_batch = max_m.max(1);
        self
    }

    pub fn non_adaptive(mut self) -> Self {
        self.non_adaptive = true;
        self
    }

    /// Replace the noise-scale estimate, clamping negatives to zero.
    pub fn set_pgns(&mut self, pgns: F) {
        self.pgns = clamp_pgns(pgns);
    }

    pub fn validate(&self) -> Result<(), GoodputError> {
        self.params.validate()?;
        if self.pgns < F::zero() || !self.pgns.is_finite() {
            return Err(GoodputError::InvalidParams(
                "pgns must be finite and non-negative".into(),
            ));
        }
        if self.init_batch < 1 {
            return Err(GoodputError::InvalidParams("init_batch must be >= 1".into()));
        }
        if let Some(max) = self.max_batch {
            if max < self.init_batch {
                return Err(GoodputError::InvalidParams(
                    "max_batch below init_batch".into(),
                ));
            }
        }
        if self.max_per_gpu_batch < 1 {
            return Err(GoodputError::InvalidParams(
                "max_per_gpu_batch must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Examples per second at the given allocation and batch configuration.
    pub fn throughput(
        &self,
        alloc: &AllocationVector,
        batch: &BatchConfig,
    ) -> Result<F, GoodputError> {
        let total = total_batch_size(alloc, batch)?;
        Ok(F::from_u64_lossy(total) / t_iter(&self.params, alloc, batch))
    }

    /// Training progress per example at total batch `M`, relative to running
    /// at the initial batch size. In (0, 1]; 1 exactly at `M = init_batch`.
    pub fn efficiency(&self, total_batch: u64) -> Result<F, GoodputError> {
        if total_batch < self.init_batch {
            return Err(GoodputError::BelowInitialBatch {
                total: total_batch,
                init: self.init_batch,
            });
        }
        if self.non_adaptive {
            return Ok(F::one());
        }
        let m0 = F::from_u64_lossy(self.init_batch);
        let m = F::from_u64_lossy(total_batch);
        Ok((self.pgns + m0) / (self.pgns + m))
    }

    /// Useful examples per second: throughput times statistical efficiency.
    pub fn goodput(
        &self,
        alloc: &AllocationVector,
        batch: &BatchConfig,
    ) -> Result<F, GoodputError> {
        let total = total_batch_size(alloc, batch)?;
        Ok(self.throughput(alloc, batch)? * self.efficiency(total)?)
    }

    /// Goodput for a (nodes, gpus) placement shape.
    pub fn goodput_shape(
        &self,
        nodes: u32,
        gpus: u32,
        batch: &BatchConfig,
    ) -> Result<F, GoodputError> {
        if gpus == 0 {
            return Err(GoodputError::NoReplicas);
        }
        let total = u64::from(gpus)
            * u64::from(batch.per_gpu_batch)
            * (u64::from(batch.accum_steps) + 1);
        let thr = F::from_u64_lossy(total) / t_iter_shape(&self.params, nodes, gpus, batch);
        Ok(thr * self.efficiency(total)?)
    }
}

fn clamp_pgns<F: Real>(pgns: F) -> F {
    if pgns.is_nan() || pgns < F::zero() {
        F::zero()
    } else {
        pgns
    }
}
