//! Speedups, fair shares, the reallocation penalty, and the fitness score.

use super::{AllocationMatrix, FitnessConfig, NodeSpec, SchedError, SchedJobInfo};
use crate::goodput::{optimize_for_shape, AllocationVector, GoodputError};

/// Additive offset inside the power mean, keeping zero-allocation speedups
/// finite for negative exponents.
pub const SPEEDUP_OFFSET: f64 = 1e-3;

/// A job's exclusive 1/J slice of the cluster and the goodput it buys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairShare {
    pub replicas: u32,
    pub nodes: u32,
    pub goodput: f64,
}

/// Fair shares for every job: the dominant resource share determines how
/// many replicas and nodes an exclusive 1/J split would grant, and the
/// job's optimized goodput on that shape becomes the speedup denominator.
pub fn fair_share(
    jobs: &[SchedJobInfo],
    nodes: &[NodeSpec],
) -> Result<Vec<FairShare>, SchedError> {
    let mut totals: std::collections::BTreeMap<&str, u64> = Default::default();
    for node in nodes {
        for (rtype, cap) in &node.resources {
            *totals.entry(rtype.as_str()).or_insert(0) += cap;
        }
    }
    let num_jobs = jobs.len().max(1) as f64;
    let num_nodes = nodes.len() as f64;
    jobs.iter()
        .map(|job| {
            let mut dominant: f64 = 0.0;
            for (rtype, demand) in &job.resources_per_replica {
                if *demand == 0 {
                    continue;
                }
                let total = totals.get(rtype.as_str()).copied().unwrap_or(0);
                if total == 0 {
                    return Err(SchedError::MissingResource {
                        job: job.id.clone(),
                        rtype: rtype.clone(),
                    });
                }
                dominant = dominant.max(*demand as f64 / total as f64);
            }
            if dominant == 0.0 {
                return Err(SchedError::MissingResource {
                    job: job.id.clone(),
                    rtype: "(none demanded)".to_string(),
                });
            }
            let replicas = (1.0 / dominant / num_jobs).ceil().max(1.0) as u32;
            let fair_nodes = (num_nodes * dominant).ceil().max(1.0) as u32;
            let goodput = fair_goodput(job, fair_nodes, replicas);
            Ok(FairShare {
                replicas,
                nodes: fair_nodes,
                goodput,
            })
        })
        .collect()
}

/// Optimized goodput on the fair shape. If the job's batch limits make that
/// shape infeasible, the replica count is grown until a feasible
/// configuration exists so the denominator stays positive.
fn fair_goodput(job: &SchedJobInfo, nodes: u32, mut replicas: u32) -> f64 {
    loop {
        match optimize_for_shape(&job.goodput_model, nodes.min(replicas), replicas) {
            Ok((_, value)) => return value,
            Err(GoodputError::InfeasibleBatch) if replicas < 1 << 20 => {
                replicas *= 2;
            }
            Err(_) => return 0.0,
        }
    }
}

/// Goodput improvement of `alloc` over the job's fair share. Zero-GPU
/// allocations (and infeasible ones) score zero.
pub fn speedup(job: &SchedJobInfo, alloc: &AllocationVector, fair: &FairShare) -> f64 {
    let gpus = alloc.total_gpus();
    if gpus == 0 || fair.goodput <= 0.0 {
        return 0.0;
    }
    match optimize_for_shape(&job.goodput_model, alloc.occupied_nodes(), gpus) {
        Ok((_, value)) => value / fair.goodput,
        Err(_) => 0.0,
    }
}

/// Penalty applied to jobs whose allocation would change, assuming their
/// historical re-allocation rate continues.
pub fn realloc_factor(age_seconds: f64, num_restarts: u32, delay: f64) -> f64 {
    if age_seconds + delay <= 0.0 {
        return 0.0;
    }
    (age_seconds - f64::from(num_restarts) * delay).max(0.0) / (age_seconds + delay)
}

/// Generalized power mean over offset speedups. `p = 0` is the geometric
/// mean over values clamped to the offset.
pub fn power_mean(speedups: &[f64], p: f64) -> f64 {
    if speedups.is_empty() {
        return 0.0;
    }
    let n = speedups.len() as f64;
    if p == 0.0 {
        let log_sum: f64 = speedups
            .iter()
            .map(|s| s.max(SPEEDUP_OFFSET).ln())
            .sum();
        (log_sum / n).exp()
    } else {
        let sum: f64 = speedups.iter().map(|s| (s + SPEEDUP_OFFSET).powf(p)).sum();
        (sum / n).powf(1.0 / p)
    }
}

/// Fitness of an allocation matrix: the power mean of per-job speedups with
/// the re-allocation penalty applied to rows that differ from the jobs'
/// current allocations.
pub fn fitness(
    jobs: &[SchedJobInfo],
    nodes: &[NodeSpec],
    matrix: &AllocationMatrix,
    cfg: &FitnessConfig,
) -> f64 {
    let fair = match fair_share(jobs, nodes) {
        Ok(f) => f,
        Err(_) => return 0.0,
    };
    let mut eval = FitnessEvaluator::new(jobs, fair, *cfg);
    eval.fitness(matrix)
}

/// Average fraction of ideal (per-replica) speedup, weighted by each job's
/// share of cluster resources on active nodes; the best-utilized resource
/// type counts.
pub fn cluster_utility(
    jobs: &[SchedJobInfo],
    nodes: &[NodeSpec],
    matrix: &AllocationMatrix,
) -> f64 {
    let mut rtypes: Vec<&str> = Vec::new();
    for job in jobs {
        for rtype in job.resources_per_replica.keys() {
            if !rtypes.contains(&rtype.as_str()) {
                rtypes.push(rtype);
            }
        }
    }
    rtypes.sort_unstable();

    let active: Vec<bool> = (0..nodes.len())
        .map(|n| matrix.rows().iter().any(|r| r.gpus_per_node()[n] > 0))
        .collect();
    let totals: Vec<u64> = rtypes
        .iter()
        .map(|rtype| {
            nodes
                .iter()
                .zip(&active)
                .filter(|(_, a)| **a)
                .map(|(node, _)| node.capacity(rtype))
                .sum()
        })
        .collect();

    let mut weighted = vec![0.0; rtypes.len()];
    for (job, row) in jobs.iter().zip(matrix.rows()) {
        let replicas = row.total_gpus();
        if replicas == 0 {
            continue;
        }
        // Fraction of ideal scaling: goodput relative to one replica of the
        // same job, divided by the replica count.
        let single = match optimize_for_shape(&job.goodput_model, 1, 1) {
            Ok((_, v)) if v > 0.0 => v,
            _ => continue,
        };
        let value = match optimize_for_shape(&job.goodput_model, row.occupied_nodes(), replicas)
        {
            Ok((_, v)) => v,
            Err(_) => continue,
        };
        let utility = (value / single) / f64::from(replicas);
        for (r, rtype) in rtypes.iter().enumerate() {
            let demand = job.resources_per_replica.get(*rtype).copied().unwrap_or(0);
            if demand == 0 || totals[r] == 0 {
                continue;
            }
            let share = (u64::from(replicas) * demand) as f64 / totals[r] as f64;
            weighted[r] += utility * share;
        }
    }
    weighted.into_iter().fold(0.0, f64::max)
}

/// Caches optimized goodput per (placement regime, GPU count) for every job,
/// so a search can score thousands of candidate matrices cheaply. The model
/// only distinguishes single-node from multi-node placements at equal GPU
/// counts, which keeps the cache small.
pub struct FitnessEvaluator<'a> {
    jobs: &'a [SchedJobInfo],
    fair: Vec<FairShare>,
    cfg: FitnessConfig,
    /// goodput cache: [job][multinode as usize][gpus]
    cache: Vec<[Vec<Option<f64>>; 2]>,
    scratch: Vec<f64>,
}

impl<'a> FitnessEvaluator<'a> {
    pub fn new(jobs: &'a [SchedJobInfo], fair: Vec<FairShare>, cfg: FitnessConfig) -> Self {
        let cache = jobs
            .iter()
            .map(|job| {
                let cap = job.max_replicas.min(1 << 12) as usize + 1;
                [vec![None; cap], vec![None; cap]]
            })
            .collect();
        FitnessEvaluator {
            jobs,
            fair,
            cfg,
            cache,
            scratch: Vec::new(),
        }
    }

    pub fn fair_shares(&self) -> &[FairShare] {
        &self.fair
    }

    fn optimized_goodput(&mut self, job: usize, nodes: u32, gpus: u32) -> f64 {
        if gpus == 0 {
            return 0.0;
        }
        let regime = usize::from(nodes >= 2);
        let slot = &mut self.cache[job][regime];
        let idx = gpus as usize;
        if idx >= slot.len() {
            return optimize_for_shape(&self.jobs[job].goodput_model, nodes, gpus)
                .map(|(_, v)| v)
                .unwrap_or(0.0);
        }
        if let Some(v) = slot[idx] {
            return v;
        }
        let v = optimize_for_shape(&self.jobs[job].goodput_model, nodes, gpus)
            .map(|(_, v)| v)
            .unwrap_or(0.0);
        slot[idx] = Some(v);
        v
    }

    /// Speedup of one row, without the re-allocation penalty.
    pub fn row_speedup(&mut self, job: usize, nodes: u32, gpus: u32) -> f64 {
        let fair = self.fair[job].goodput;
        if gpus == 0 || fair <= 0.0 {
            return 0.0;
        }
        self.optimized_goodput(job, nodes, gpus) / fair
    }

    /// Fitness of a full matrix, with the penalty on changed rows.
    pub fn fitness(&mut self, matrix: &AllocationMatrix) -> f64 {
        let mut speedups = std::mem::take(&mut self.scratch);
        speedups.clear();
        for j in 0..self.jobs.len() {
            let row = matrix.row(j);
            let mut s = self.row_speedup(j, row.occupied_nodes(), row.total_gpus());
            if self.jobs[j].started && row != &self.jobs[j].current_allocation {
                s *= realloc_factor(
                    self.jobs[j].age_seconds,
                    self.jobs[j].num_restarts,
                    self.cfg.realloc_delay,
                );
            }
            speedups.push(s);
        }
        let value = power_mean(&speedups, self.cfg.p);
        self.scratch = speedups;
        value
    }

    /// Fitness from raw per-node counts (the search's flat representation).
    pub(crate) fn fitness_flat(&mut self, state: &[u32], num_nodes: usize) -> f64 {
        let mut speedups = std::mem::take(&mut self.scratch);
        speedups.clear();
        for j in 0..self.jobs.len() {
            let row = &state[j * num_nodes..(j + 1) * num_nodes];
            let gpus: u32 = row.iter().sum();
            let nodes = row.iter().filter(|&&g| g > 0).count() as u32;
            let mut s = self.row_speedup(j, nodes, gpus);
            if self.jobs[j].started && row != self.jobs[j].current_allocation.gpus_per_node() {
                s *= realloc_factor(
                    self.jobs[j].age_seconds,
                    self.jobs[j].num_restarts,
                    self.cfg.realloc_delay,
                );
            }
            speedups.push(s);
        }
        let value = power_mean(&speedups, self.cfg.p);
        self.scratch = speedups;
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goodput::ThroughputParams;
    use crate::GoodputModel;
    use approx::assert_relative_eq;

    fn scalable_model(phi: f64) -> GoodputModel {
        // No synchronization cost and no per-pass constant: throughput is
        // proportional to the GPU count.
        GoodputModel::new(
            ThroughputParams {
                alpha_grad: 0.0,
                beta_grad: 0.001,
                alpha_sync_local: 0.0,
                beta_sync_local: 0.0,
                alpha_sync_node: 0.0,
                beta_sync_node: 0.0,
                gamma: 1.0,
            },
            phi,
            64,
        )
        .with_max_per_gpu_batch(64)
    }

    fn cluster(n: usize, gpus: u64) -> Vec<NodeSpec> {
        (0..n).map(|_| NodeSpec::gpus(gpus)).collect()
    }

    #[test]
    fn fair_share_examples() {
        // One job, sixteen 4-GPU nodes: dominant share 1/64, 64 fair
        // replicas on one fair node.
        let nodes = cluster(16, 4);
        let jobs = vec![SchedJobInfo::new("a", scalable_model(1e12), 16)];
        let fair = fair_share(&jobs, &nodes).unwrap();
        assert_eq!(fair[0].replicas, 64);
        assert_eq!(fair[0].nodes, 1);

        // 64 jobs on 64 GPUs: one replica each.
        let jobs: Vec<SchedJobInfo> = (0..64)
            .map(|i| SchedJobInfo::new(format!("j{i}"), scalable_model(100.0), 16))
            .collect();
        let fair = fair_share(&jobs, &nodes).unwrap();
        assert!(fair.iter().all(|f| f.replicas == 1));

        // Two resource types: the GPU share dominates.
        let mut job = SchedJobInfo::new("a", scalable_model(100.0), 2);
        job.resources_per_replica.insert("cpu".into(), 1);
        let mut nodes = cluster(2, 2);
        for n in &mut nodes {
            n.resources.insert("cpu".into(), 100);
        }
        let fair = fair_share(&[job], &nodes).unwrap();
        assert_eq!(fair[0].replicas, 4);

        // Demanding an absent resource errors.
        let mut job = SchedJobInfo::new("a", scalable_model(100.0), 2);
        job.resources_per_replica.insert("tpu".into(), 1);
        assert!(matches!(
            fair_share(&[job], &cluster(2, 2)),
            Err(SchedError::MissingResource { .. })
        ));
    }

    #[test]
    fn speedup_examples() {
        let nodes = cluster(4, 4);
        // Two jobs so the fair share is half the cluster (8 GPUs).
        let jobs = vec![
            SchedJobInfo::new("a", scalable_model(1e12), 4),
            SchedJobInfo::new("b", scalable_model(1e12), 4),
        ];
        let fair = fair_share(&jobs, &nodes).unwrap();
        assert_eq!(fair[0].replicas, 8);

        // At the fair allocation the ratio is 1.
        let fair_alloc = AllocationVector::from_shape(2, 8);
        assert_relative_eq!(speedup(&jobs[0], &fair_alloc, &fair[0]), 1.0);

        // Empty allocation scores zero.
        assert_eq!(speedup(&jobs[0], &AllocationVector::empty(4), &fair[0]), 0.0);

        // Perfectly scalable job with twice the fair GPUs: speedup 2.
        let double = AllocationVector::from_shape(4, 16);
        assert_relative_eq!(speedup(&jobs[0], &double, &fair[0]), 2.0, max_relative = 1e-9);
    }

    #[test]
    fn realloc_factor_examples() {
        assert_relative_eq!(realloc_factor(600.0, 1, 30.0), 570.0 / 630.0);
        assert_relative_eq!(realloc_factor(1e9, 0, 30.0), 1.0, max_relative = 1e-6);
        // age - R * delay < 0 clamps to zero.
        assert_eq!(realloc_factor(50.0, 3, 30.0), 0.0);
    }

    #[test]
    fn power_mean_examples() {
        for p in [1.0, -1.0, -10.0, 0.0] {
            assert_relative_eq!(power_mean(&[2.0, 2.0, 2.0], p), 2.0, epsilon = 3e-3);
        }
        assert_relative_eq!(power_mean(&[1.0, 3.0], 1.0), 2.0, epsilon = 2e-3);
        assert_relative_eq!(power_mean(&[1.0, 3.0], -1.0), 1.5, epsilon = 2e-3);

        // Strongly negative exponents approach the minimum from above, off
        // by at most a factor n^(1/|p|).
        let vals = [0.7, 1.9, 3.4];
        let fit = power_mean(&vals, -50.0);
        let min = 0.7 + SPEEDUP_OFFSET;
        assert!(fit >= min);
        assert!(fit <= min * 3f64.powf(1.0 / 50.0) + 1e-9);

        // Monotone: lowering one speedup never raises the mean.
        let lower = power_mean(&[0.5, 1.9, 3.4], -1.0);
        assert!(lower <= power_mean(&vals, -1.0));
    }

    #[test]
    fn utility_of_fair_allocated_linear_job_is_one() {
        let nodes = cluster(16, 4);
        let jobs = vec![SchedJobInfo::new("a", scalable_model(1e12), 16)];
        // Fair share for a single job is the whole cluster.
        let matrix = AllocationMatrix::new(vec![AllocationVector::from_shape(16, 64)]);
        let u = cluster_utility(&jobs, &nodes, &matrix);
        assert_relative_eq!(u, 1.0, max_relative = 1e-9);

        let empty = AllocationMatrix::zeros(1, 16);
        assert_eq!(cluster_utility(&jobs, &nodes, &empty), 0.0);
    }

    #[test]
    fn utility_stays_at_most_one_for_sublinear_jobs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let nodes = cluster(4, 4);
        for _ in 0..50 {
            let model = GoodputModel::new(
                ThroughputParams {
                    alpha_grad: rng.gen_range(0.001..0.1),
                    beta_grad: rng.gen_range(0.0001..0.01),
                    alpha_sync_local: rng.gen_range(0.0..0.3),
                    beta_sync_local: rng.gen_range(0.0..0.05),
                    alpha_sync_node: rng.gen_range(0.0..0.6),
                    beta_sync_node: rng.gen_range(0.0..0.1),
                    gamma: rng.gen_range(1.0..4.0),
                },
                rng.gen_range(0.0..2000.0),
                rng.gen_range(16..128),
            )
            .with_max_per_gpu_batch(256);
            let jobs = vec![SchedJobInfo::new("a", model, 4)];
            let nodes_used = rng.gen_range(1..=4u32);
            let gpus = rng.gen_range(nodes_used..=4 * nodes_used);
            let shape = AllocationVector::from_shape(nodes_used, gpus);
            let mut row = shape.gpus_per_node().to_vec();
            row.resize(4, 0);
            let matrix = AllocationMatrix::new(vec![AllocationVector::new(row)]);
            let u = cluster_utility(&jobs, &nodes, &matrix);
            // Sync costs and efficiency make scaling sublinear, so the
            // fraction of ideal speedup cannot exceed 1.
            assert!(u <= 1.0 + 1e-9, "utility {u}");
        }
    }
}
