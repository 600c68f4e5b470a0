//! Online estimation of the throughput model and the gradient noise scale.
//!
//! Jobs accumulate `(allocation, batch, iteration time)` observations as they
//! run. [`fit_throughput`] recovers the seven throughput parameters from
//! those observations by minimizing the root mean squared logarithmic error
//! under bound constraints, with exploration priors pinning synchronization
//! parameters to zero until the job has actually run in the placement regime
//! that would identify them.

mod optimizer;
mod pgns;

pub use pgns::{
    pgns_differenced, pgns_two_scale, GradientStats, PgnsTracker, PGNS_HALF_LIFE_REPORTS,
    SQ_NORM_EPS,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::goodput::{
    t_iter_shape, AllocationVector, BatchConfig, ThroughputParams, GAMMA_MAX, GAMMA_MIN,
};
use optimizer::{minimize, BfgsOptions};

/// Errors from model fitting and noise estimation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FitError {
    #[error("no profile points to fit")]
    NoData,
    #[error("degenerate batch sizes: small {small}, big {big}")]
    DegenerateBatchSizes { small: u64, big: u64 },
}

/// One observed iteration time under a particular configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub allocation: AllocationVector,
    pub batch: BatchConfig,
    pub observed_t_iter: f64,
}

impl ProfilePoint {
    pub fn new(allocation: AllocationVector, batch: BatchConfig, observed_t_iter: f64) -> Self {
        assert!(observed_t_iter > 0.0, "iteration time must be positive");
        ProfilePoint {
            allocation,
            batch,
            observed_t_iter,
        }
    }
}

/// Which placement regimes a job has ever run in. Flags only ever turn on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplorationState {
    seen_multi_gpu: bool,
    seen_multi_node: bool,
    seen_three_plus_gpus: bool,
    max_gpus_seen: u32,
}

impl Default for ExplorationState {
    fn default() -> Self {
        ExplorationState {
            seen_multi_gpu: false,
            seen_multi_node: false,
            seen_three_plus_gpus: false,
            max_gpus_seen: 1,
        }
    }
}

impl ExplorationState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record that the job ran under `alloc`.
    pub fn observe(&mut self, alloc: &AllocationVector) {
        let gpus = alloc.total_gpus();
        let nodes = alloc.occupied_nodes();
        self.seen_multi_gpu |= gpus >= 2;
        self.seen_multi_node |= nodes >= 2;
        self.seen_three_plus_gpus |= gpus >= 3;
        self.max_gpus_seen = self.max_gpus_seen.max(gpus.max(1));
    }

    pub fn seen_multi_gpu(&self) -> bool {
        self.seen_multi_gpu
    }

    pub fn seen_multi_node(&self) -> bool {
        self.seen_multi_node
    }

    pub fn seen_three_plus_gpus(&self) -> bool {
        self.seen_three_plus_gpus
    }

    pub fn max_gpus_seen(&self) -> u32 {
        self.max_gpus_seen
    }

    /// Most GPUs the scheduler may hand this job: twice the largest count it
    /// has ever held, so unexplored jobs grow gradually.
    pub fn allocation_cap(&self) -> u32 {
        2 * self.max_gpus_seen
    }
}

/// Free-function form of [`ExplorationState::allocation_cap`].
pub fn allocation_cap(state: &ExplorationState) -> u32 {
    state.allocation_cap()
}

/// Root mean squared logarithmic error of the model against observations.
pub fn rmsle(params: &ThroughputParams<f64>, points: &[ProfilePoint]) -> Result<f64, FitError> {
    if points.is_empty() {
        return Err(FitError::NoData);
    }
    let mut acc = 0.0;
    for p in points {
        let predicted = t_iter_shape(
            params,
            p.allocation.occupied_nodes(),
            p.allocation.total_gpus(),
            &p.batch,
        );
        let d = predicted.ln() - p.observed_t_iter.ln();
        acc += d * d;
    }
    Ok((acc / points.len() as f64).sqrt())
}

/// Result of one fitting pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ThroughputParams<f64>,
    pub rmsle: f64,
    /// True when the optimizer produced nothing usable and the previous (or
    /// priors-only) parameters were returned instead.
    pub fallback: bool,
}

const NUM_COEFFS: usize = 6;
const IDX_GAMMA: usize = 6;
const MULTI_START_SEED: u64 = 0x600d_f175;
const NUM_RANDOM_STARTS: usize = 6;

/// Fit the throughput parameters to all collected observations.
///
/// Synchronization parameters whose placement regime is still unexplored are
/// pinned to exactly zero, which biases the model towards perfect scaling
/// until data exists. The fit itself is a bounded quasi-Newton minimization
/// of the RMSLE run from a deterministic set of starts (the previous fit, a
/// data-driven heuristic, and fixed-seed random draws).
pub fn fit_throughput(
    points: &[ProfilePoint],
    state: &ExplorationState,
    prev: Option<&ThroughputParams<f64>>,
) -> Result<FitReport, FitError> {
    if points.is_empty() {
        return Err(FitError::NoData);
    }
    let free = free_mask(state);
    let prepared: Vec<PreparedPoint> = points.iter().map(PreparedPoint::from).collect();

    let objective = |x: &[f64]| {
        let params = assemble(x, &free);
        msle(&params, &prepared)
    };

    let mut starts: Vec<[f64; 7]> = Vec::new();
    if let Some(p) = prev {
        starts.push(param_array(p));
    }
    starts.push(heuristic_start(&prepared));
    let mut rng = ChaCha8Rng::seed_from_u64(MULTI_START_SEED);
    let t_med = median(prepared.iter().map(|p| p.observed));
    let m_med = median(prepared.iter().map(|p| f64::from(p.per_gpu_batch))).max(1.0);
    for _ in 0..NUM_RANDOM_STARTS {
        let mut draw = [0.0; 7];
        for (i, slot) in draw.iter_mut().enumerate().take(NUM_COEFFS) {
            let scale = if i == 1 { t_med / m_med } else { t_med };
            *slot = scale * 10f64.powf(rng.gen_range(-2.0..0.5));
        }
        draw[IDX_GAMMA] = rng.gen_range(GAMMA_MIN..GAMMA_MAX);
        starts.push(draw);
    }

    let opts = BfgsOptions::default();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in &starts {
        let x0 = encode(start, &free);
        let (x, fx) = minimize(objective, &x0, &opts);
        if fx.is_finite() && best.as_ref().map_or(true, |(_, b)| fx < *b) {
            best = Some((x, fx));
        }
    }

    match best {
        Some((x, _)) => {
            let params = assemble(&x, &free);
            let err = rmsle(&params, points)?;
            Ok(FitReport {
                params,
                rmsle: err,
                fallback: false,
            })
        }
        None => {
            let params = prev.copied().unwrap_or_else(|| priors_only(&prepared));
            let err = rmsle(&params, points).unwrap_or(f64::INFINITY);
            Ok(FitReport {
                params,
                rmsle: err,
                fallback: true,
            })
        }
    }
}

/// Which of the seven parameters the optimizer may move, given exploration.
fn free_mask(state: &ExplorationState) -> [bool; 7] {
    let local_alpha = state.seen_multi_gpu();
    let local_beta = state.seen_three_plus_gpus();
    let node_alpha = state.seen_multi_node();
    let node_beta = state.seen_multi_node() && state.seen_three_plus_gpus();
    [true, true, local_alpha, local_beta, node_alpha, node_beta, true]
}

struct PreparedPoint {
    nodes: u32,
    gpus: u32,
    per_gpu_batch: u32,
    accum_steps: u32,
    observed: f64,
    ln_observed: f64,
}

impl From<&ProfilePoint> for PreparedPoint {
    fn from(p: &ProfilePoint) -> Self {
        PreparedPoint {
            nodes: p.allocation.occupied_nodes(),
            gpus: p.allocation.total_gpus(),
            per_gpu_batch: p.batch.per_gpu_batch,
            accum_steps: p.batch.accum_steps,
            observed: p.observed_t_iter,
            ln_observed: p.observed_t_iter.ln(),
        }
    }
}

fn msle(params: &ThroughputParams<f64>, points: &[PreparedPoint]) -> f64 {
    let mut acc = 0.0;
    for p in points {
        let predicted = t_iter_shape(
            params,
            p.nodes,
            p.gpus,
            &BatchConfig::new(p.per_gpu_batch, p.accum_steps),
        );
        if !(predicted > 0.0) || !predicted.is_finite() {
            return 1e30;
        }
        let d = predicted.ln() - p.ln_observed;
        acc += d * d;
    }
    acc / points.len() as f64
}

fn param_array(p: &ThroughputParams<f64>) -> [f64; 7] {
    [
        p.alpha_grad,
        p.beta_grad,
        p.alpha_sync_local,
        p.beta_sync_local,
        p.alpha_sync_node,
        p.beta_sync_node,
        p.gamma,
    ]
}

/// Map natural parameters into the unconstrained optimizer space: the
/// non-negative coefficients through a square root and gamma through a
/// logit over its range. Masked parameters are dropped.
fn encode(values: &[f64; 7], free: &[bool; 7]) -> Vec<f64> {
    let mut x = Vec::with_capacity(7);
    for i in 0..NUM_COEFFS {
        if free[i] {
            x.push(values[i].max(0.0).sqrt());
        }
    }
    let g = values[IDX_GAMMA].clamp(GAMMA_MIN + 1e-6, GAMMA_MAX - 1e-6);
    let frac = (g - GAMMA_MIN) / (GAMMA_MAX - GAMMA_MIN);
    x.push((frac / (1.0 - frac)).ln());
    x
}

fn assemble(x: &[f64], free: &[bool; 7]) -> ThroughputParams<f64> {
    let mut values = [0.0; 7];
    let mut k = 0;
    for i in 0..NUM_COEFFS {
        if free[i] {
            values[i] = x[k] * x[k];
            k += 1;
        }
    }
    let sig = 1.0 / (1.0 + (-x[k]).exp());
    values[IDX_GAMMA] = (GAMMA_MIN + (GAMMA_MAX - GAMMA_MIN) * sig).clamp(GAMMA_MIN, GAMMA_MAX);
    ThroughputParams {
        alpha_grad: values[0],
        beta_grad: values[1],
        alpha_sync_local: values[2],
        beta_sync_local: values[3],
        alpha_sync_node: values[4],
        beta_sync_node: values[5],
        gamma: values[6],
    }
}

/// Data-driven starting point: single-GPU points pin the gradient-time line
/// exactly (there t_iter = (s + 1) * (alpha + beta * m)); residuals of
/// multi-GPU points seed the synchronization terms.
fn heuristic_start(points: &[PreparedPoint]) -> [f64; 7] {
    let single: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.gpus == 1)
        .map(|p| {
            (
                f64::from(p.per_gpu_batch),
                p.observed / (f64::from(p.accum_steps) + 1.0),
            )
        })
        .collect();
    let all: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            (
                f64::from(p.per_gpu_batch),
                p.observed / (f64::from(p.accum_steps) + 1.0),
            )
        })
        .collect();
    let (alpha_g, beta_g) = linear_fit(if single.is_empty() { &all } else { &single });

    let sync_start = |filter: &dyn Fn(&&PreparedPoint) -> bool| -> (f64, f64) {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .filter(filter)
            .map(|p| {
                let tg = alpha_g + beta_g * f64::from(p.per_gpu_batch);
                let overlap = p.observed - f64::from(p.accum_steps) * tg;
                (f64::from(p.gpus - 2), (overlap - tg).max(1e-6))
            })
            .collect();
        if pts.is_empty() {
            (0.0, 0.0)
        } else {
            let (a, b) = linear_fit(&pts);
            (a.max(0.0), b.max(0.0))
        }
    };
    let (alpha_l, beta_l) = sync_start(&|p| p.gpus >= 2 && p.nodes <= 1);
    let (alpha_n, beta_n) = sync_start(&|p| p.gpus >= 2 && p.nodes >= 2);
    [
        alpha_g.max(0.0),
        beta_g.max(0.0),
        alpha_l,
        beta_l,
        alpha_n,
        beta_n,
        2.0,
    ]
}

fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return (sy / n, 0.0);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}

fn priors_only(points: &[PreparedPoint]) -> ThroughputParams<f64> {
    let beta = median(
        points
            .iter()
            .map(|p| p.observed / ((f64::from(p.accum_steps) + 1.0) * f64::from(p.per_gpu_batch))),
    );
    ThroughputParams {
        alpha_grad: 0.0,
        beta_grad: beta.max(1e-12),
        alpha_sync_local: 0.0,
        beta_sync_local: 0.0,
        alpha_sync_node: 0.0,
        beta_sync_node: 0.0,
        gamma: 1.0,
    }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn true_params() -> ThroughputParams<f64> {
        ThroughputParams {
            alpha_grad: 0.08,
            beta_grad: 0.003,
            alpha_sync_local: 0.12,
            beta_sync_local: 0.015,
            alpha_sync_node: 0.45,
            beta_sync_node: 0.03,
            gamma: 2.4,
        }
    }

    /// Noiseless observations covering every placement regime.
    fn synthetic_points(params: &ThroughputParams<f64>) -> Vec<ProfilePoint> {
        let mut points = Vec::new();
        let shapes: [(u32, u32); 8] = [
            (1, 1),
            (1, 2),
            (1, 3),
            (1, 4),
            (2, 5),
            (2, 8),
            (4, 12),
            (4, 16),
        ];
        for (nodes, gpus) in shapes {
            for m in [8u32, 16, 32, 64] {
                for s in [0u32, 1, 3] {
                    let alloc = AllocationVector::from_shape(nodes, gpus);
                    let batch = BatchConfig::new(m, s);
                    let t = t_iter_shape(params, nodes, gpus, &batch);
                    points.push(ProfilePoint::new(alloc, batch, t));
                }
            }
        }
        points
    }

    fn fully_explored() -> ExplorationState {
        let mut st = ExplorationState::new();
        st.observe(&AllocationVector::from_shape(4, 16));
        st
    }

    #[test]
    fn rmsle_examples() {
        let p = true_params();
        let points = synthetic_points(&p);
        assert!(rmsle(&p, &points).unwrap() < 1e-12);

        // Single point predicted at twice the observation: |ln 2|.
        let alloc = AllocationVector::from_shape(1, 1);
        let batch = BatchConfig::new(10, 0);
        let t = t_iter_shape(&p, 1, 1, &batch);
        let half = vec![ProfilePoint::new(alloc, batch, t / 2.0)];
        assert_relative_eq!(rmsle(&p, &half).unwrap(), 2f64.ln(), max_relative = 1e-12);

        assert_eq!(rmsle(&p, &[]), Err(FitError::NoData));
    }

    #[test]
    fn rmsle_is_scale_invariant() {
        // Scaling predictions and observations by the same factor leaves the
        // log differences, and hence the error, unchanged.
        let truth = true_params();
        let mut mismatched = truth;
        mismatched.alpha_sync_node *= 2.0;
        mismatched.gamma = 1.3;
        let points = synthetic_points(&truth);
        let base = rmsle(&mismatched, &points).unwrap();
        assert!(base > 0.0);

        let c = 7.25;
        let mut scaled = mismatched;
        scaled.alpha_grad *= c;
        scaled.beta_grad *= c;
        scaled.alpha_sync_local *= c;
        scaled.beta_sync_local *= c;
        scaled.alpha_sync_node *= c;
        scaled.beta_sync_node *= c;
        let scaled_points: Vec<ProfilePoint> = points
            .iter()
            .map(|pt| ProfilePoint::new(pt.allocation.clone(), pt.batch, pt.observed_t_iter * c))
            .collect();
        let after = rmsle(&scaled, &scaled_points).unwrap();
        assert_relative_eq!(base, after, max_relative = 1e-9);
    }

    #[test]
    fn recovers_noiseless_parameters() {
        let truth = true_params();
        let points = synthetic_points(&truth);
        let report = fit_throughput(&points, &fully_explored(), None).unwrap();
        assert!(!report.fallback);
        assert!(report.rmsle <= 1e-6, "rmsle = {}", report.rmsle);
        let fitted = param_array(&report.params);
        let expected = param_array(&truth);
        for (f, e) in fitted.iter().zip(expected.iter()) {
            assert!(
                (f - e).abs() <= 0.01 * e.abs(),
                "fitted {fitted:?} vs {expected:?}"
            );
        }
    }

    #[test]
    fn priors_pin_unexplored_parameters_to_zero() {
        let truth = true_params();
        let points: Vec<ProfilePoint> = synthetic_points(&truth)
            .into_iter()
            .filter(|p| p.allocation.total_gpus() == 1)
            .collect();
        let mut state = ExplorationState::new();
        state.observe(&AllocationVector::from_shape(1, 1));
        let report = fit_throughput(&points, &state, None).unwrap();
        assert_eq!(report.params.alpha_sync_local, 0.0);
        assert_eq!(report.params.beta_sync_local, 0.0);
        assert_eq!(report.params.alpha_sync_node, 0.0);
        assert_eq!(report.params.beta_sync_node, 0.0);
        assert!(report.rmsle < 1e-6);
    }

    #[test]
    fn fitting_is_deterministic() {
        let truth = true_params();
        let points = synthetic_points(&truth);
        let a = fit_throughput(&points, &fully_explored(), None).unwrap();
        let b = fit_throughput(&points, &fully_explored(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fitted_params_respect_bounds() {
        // Adversarial observations still produce in-bounds parameters.
        let mut points = Vec::new();
        for (i, t) in [0.5, 0.1, 2.0, 0.01, 3.5].iter().enumerate() {
            let gpus = (i as u32 % 4) + 1;
            points.push(ProfilePoint::new(
                AllocationVector::from_shape(1 + (i as u32 % 2), gpus.max(1 + i as u32 % 2)),
                BatchConfig::new(8 * (i as u32 + 1), i as u32 % 3),
                *t,
            ));
        }
        let report = fit_throughput(&points, &fully_explored(), None).unwrap();
        assert!(report.params.validate().is_ok());
    }

    #[test]
    fn allocation_cap_doubles_max_seen() {
        let mut state = ExplorationState::new();
        assert_eq!(allocation_cap(&state), 2);
        state.observe(&AllocationVector::from_shape(2, 4));
        assert_eq!(allocation_cap(&state), 8);
        // Monotone: observing a smaller allocation never lowers the cap.
        state.observe(&AllocationVector::from_shape(1, 1));
        assert_eq!(allocation_cap(&state), 8);
    }
}
