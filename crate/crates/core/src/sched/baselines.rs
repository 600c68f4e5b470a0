//! Baseline scheduling policies: a Tiresias-like two-queue policy with fixed
//! GPU requests, and an Optimus-like greedy policy that sizes jobs by
//! marginal reduction in predicted remaining time.

use super::{AllocationMatrix, NodeSpec, SchedJobInfo};
use crate::goodput::{optimize_for_shape, AllocationVector};

/// Per-node free replica slots for one job, given its per-replica demands.
fn replica_capacity(job: &SchedJobInfo, node: &NodeSpec, used: &[(String, u64)]) -> u64 {
    job.resources_per_replica
        .iter()
        .filter(|(_, d)| **d > 0)
        .map(|(rtype, demand)| {
            let cap = node.capacity(rtype);
            let consumed = used
                .iter()
                .find(|(r, _)| r == rtype)
                .map(|(_, u)| *u)
                .unwrap_or(0);
            cap.saturating_sub(consumed) / demand
        })
        .min()
        .unwrap_or(0)
}

/// Tracks per-node consumption during placement.
struct Ledger<'a> {
    nodes: &'a [NodeSpec],
    used: Vec<Vec<(String, u64)>>,
}

impl<'a> Ledger<'a> {
    fn new(nodes: &'a [NodeSpec]) -> Self {
        Ledger {
            nodes,
            used: vec![Vec::new(); nodes.len()],
        }
    }

    fn free_replicas(&self, job: &SchedJobInfo, node: usize) -> u64 {
        replica_capacity(job, &self.nodes[node], &self.used[node])
    }

    fn commit(&mut self, job: &SchedJobInfo, node: usize, replicas: u64) {
        for (rtype, demand) in &job.resources_per_replica {
            let entry = self
                .used[node]
                .iter_mut()
                .find(|(r, _)| r == rtype);
            match entry {
                Some((_, u)) => *u += replicas * demand,
                None => self.used[node].push((rtype.clone(), replicas * demand)),
            }
        }
    }

    /// Keep a job's existing row if it still fits.
    fn try_keep(&mut self, job: &SchedJobInfo, row: &AllocationVector) -> bool {
        let gpn = row.gpus_per_node();
        if gpn
            .iter()
            .enumerate()
            .all(|(n, &g)| u64::from(g) <= self.free_replicas(job, n))
        {
            for (n, &g) in gpn.iter().enumerate() {
                if g > 0 {
                    self.commit(job, n, u64::from(g));
                }
            }
            true
        } else {
            false
        }
    }

    /// Place `count` replicas on as few nodes as possible: one node when any
    /// single node fits everything, otherwise greedily from the emptiest.
    fn place_packed(&mut self, job: &SchedJobInfo, count: u32) -> Option<Vec<u32>> {
        let nn = self.nodes.len();
        let free: Vec<u64> = (0..nn).map(|n| self.free_replicas(job, n)).collect();
        if free.iter().sum::<u64>() < u64::from(count) {
            return None;
        }
        let mut row = vec![0u32; nn];
        // Best fit: the fullest node that still holds the whole job.
        if let Some(n) = (0..nn)
            .filter(|&n| free[n] >= u64::from(count))
            .min_by_key(|&n| (free[n], n))
        {
            row[n] = count;
            self.commit(job, n, u64::from(count));
            return Some(row);
        }
        // Split: largest holes first keeps the node count minimal.
        let mut order: Vec<usize> = (0..nn).collect();
        order.sort_by_key(|&n| (std::cmp::Reverse(free[n]), n));
        let mut left = u64::from(count);
        for n in order {
            if left == 0 {
                break;
            }
            let grant = free[n].min(left);
            if grant > 0 {
                row[n] = grant as u32;
                self.commit(job, n, grant);
                left -= grant;
            }
        }
        Some(row)
    }
}

/// Two-queue least-attained-service policy with fixed user GPU requests.
///
/// Jobs below `queue_threshold_gpu_hours` of attained GPU time are scheduled
/// before jobs above it; within a queue, older submissions go first. Each
/// scheduled job receives exactly its requested GPU count, packed onto as few
/// nodes as possible; jobs that do not fit wait.
pub fn tiresias_policy(
    jobs: &[SchedJobInfo],
    nodes: &[NodeSpec],
    queue_threshold_gpu_hours: f64,
) -> AllocationMatrix {
    let threshold_seconds = queue_threshold_gpu_hours * 3600.0;
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| {
        let qa = jobs[a].attained_gpu_seconds >= threshold_seconds;
        let qb = jobs[b].attained_gpu_seconds >= threshold_seconds;
        qa.cmp(&qb)
            .then(
                jobs[b]
                    .age_seconds
                    .partial_cmp(&jobs[a].age_seconds)
                    .unwrap(),
            )
            .then(jobs[a].id.cmp(&jobs[b].id))
    });

    // Walk in priority order; each job keeps its current placement when it
    // still fits, avoiding gratuitous restarts, and is packed fresh
    // otherwise. Lower-priority jobs see only what remains.
    let mut ledger = Ledger::new(nodes);
    let mut rows: Vec<Option<Vec<u32>>> = vec![None; jobs.len()];
    for &j in &order {
        let job = &jobs[j];
        let want = job.requested_replicas.unwrap_or(1);
        if job.current_allocation.total_gpus() == want
            && want > 0
            && ledger.try_keep(job, &job.current_allocation)
        {
            rows[j] = Some(job.current_allocation.gpus_per_node().to_vec());
        } else {
            rows[j] = ledger.place_packed(job, want);
        }
    }
    AllocationMatrix::new(
        rows.into_iter()
            .map(|r| AllocationVector::new(r.unwrap_or_else(|| vec![0; nodes.len()])))
            .collect(),
    )
}

/// Greedy scale-adaptive policy: repeatedly grant one GPU to the job whose
/// predicted remaining time (remaining iterations at its fixed batch size
/// divided by modeled throughput) drops the most, until GPUs run out or no
/// job benefits.
pub fn optimus_policy(jobs: &[SchedJobInfo], nodes: &[NodeSpec]) -> AllocationMatrix {
    // Packed placement shape for k replicas given per-node slot counts.
    let node_slots: Vec<u64> = nodes
        .iter()
        .map(|n| n.capacity("gpu"))
        .collect();
    let mut sorted_slots: Vec<u64> = node_slots.clone();
    sorted_slots.sort_unstable_by(|a, b| b.cmp(a));
    let packed_nodes = |k: u32| -> u32 {
        let mut left = u64::from(k);
        let mut used = 0u32;
        for s in &sorted_slots {
            if left == 0 {
                break;
            }
            left = left.saturating_sub(*s);
            used += 1;
        }
        used.max(1)
    };

    let total_gpus: u64 = node_slots.iter().sum();
    let remaining_time = |job: &SchedJobInfo, k: u32| -> f64 {
        if k == 0 {
            return f64::INFINITY;
        }
        match optimize_for_shape(&job.goodput_model, packed_nodes(k), k) {
            // Non-adaptive models make goodput equal throughput at the fixed
            // batch size.
            Ok((_, thr)) if thr > 0.0 => {
                let iters = job.remaining_iterations.unwrap_or(1e6).max(1.0);
                iters * job.goodput_model.init_batch as f64 / thr
            }
            _ => f64::INFINITY,
        }
    };

    let mut counts = vec![0u32; jobs.len()];
    let mut times: Vec<f64> = jobs.iter().map(|j| remaining_time(j, 0)).collect();
    let mut granted = 0u64;
    loop {
        if granted >= total_gpus {
            break;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for (j, job) in jobs.iter().enumerate() {
            if u64::from(counts[j]) >= u64::from(job.max_replicas).min(total_gpus) {
                continue;
            }
            let t_next = remaining_time(job, counts[j] + 1);
            let gain = times[j] - t_next;
            if gain > 0.0 {
                let better = match &best {
                    None => true,
                    Some((bj, bgain, _)) => {
                        gain > *bgain || (gain == *bgain && jobs[j].id < jobs[*bj].id)
                    }
                };
                if better {
                    best = Some((j, gain, t_next));
                }
            }
        }
        match best {
            Some((j, _, t_next)) => {
                counts[j] += 1;
                times[j] = t_next;
                granted += 1;
            }
            None => break,
        }
    }

    // Place the chosen counts: keep unchanged rows, then pack the rest,
    // biggest jobs first.
    let mut ledger = Ledger::new(nodes);
    let mut rows: Vec<Option<Vec<u32>>> = vec![None; jobs.len()];
    for (j, job) in jobs.iter().enumerate() {
        if counts[j] > 0
            && job.current_allocation.total_gpus() == counts[j]
            && ledger.try_keep(job, &job.current_allocation)
        {
            rows[j] = Some(job.current_allocation.gpus_per_node().to_vec());
        }
    }
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(counts[j]), j));
    for j in order {
        if rows[j].is_some() || counts[j] == 0 {
            continue;
        }
        rows[j] = ledger.place_packed(&jobs[j], counts[j]);
    }
    AllocationMatrix::new(
        rows.into_iter()
            .map(|r| AllocationVector::new(r.unwrap_or_else(|| vec![0; nodes.len()])))
            .collect(),
    )
}
