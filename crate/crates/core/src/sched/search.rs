//! Population-based search over allocation matrices.
//!
//! Candidates are perturbed and recombined: single-point crossover across the
//! job axis, mutation that resets rows to the incumbent state, zeroes
//! entries, or grows entries to a random feasible replica count, and a repair
//! pass that restores every feasibility invariant (pinned rows, interference
//! avoidance, replica bounds, the per-job node cap, and node capacities).
//! Selection is elitist on fitness; cluster utility is carried along as a
//! secondary objective for consumers that want it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    cluster_utility, fair_share, validate_matrix, AllocationMatrix, FitnessConfig,
    FitnessEvaluator, NodeSpec, SchedJobInfo,
};
use crate::goodput::AllocationVector;

/// Search hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub fitness: FitnessConfig,
    /// Also score the final population on cluster utility (costs one
    /// optimization sweep per individual; consumers that only need the best
    /// matrix leave this off).
    pub collect_objectives: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 100,
            generations: 50,
            fitness: FitnessConfig::default(),
            collect_objectives: false,
        }
    }
}

/// Outcome of one search round.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub matrix: AllocationMatrix,
    pub fitness: f64,
    pub utility: f64,
    /// (fitness, utility) of the final population, for consumers that want
    /// the secondary objective.
    pub population_objectives: Vec<(f64, f64)>,
}

/// One-shot search. Deterministic in `seed`.
pub fn search_allocations(
    jobs: &[SchedJobInfo],
    nodes: &[NodeSpec],
    cfg: &SearchConfig,
    seed: u64,
) -> AllocationMatrix {
    GeneticSearch::new(*cfg).search(jobs, nodes, seed).matrix
}

/// Reusable search state: the population survives across scheduling rounds
/// (rows keyed by job id) so each round starts warm.
pub struct GeneticSearch {
    cfg: SearchConfig,
    warm: Option<WarmState>,
}

struct WarmState {
    job_ids: Vec<String>,
    num_nodes: usize,
    population: Vec<Vec<u32>>,
}

impl GeneticSearch {
    pub fn new(cfg: SearchConfig) -> Self {
        GeneticSearch { cfg, warm: None }
    }

    pub fn search(
        &mut self,
        jobs: &[SchedJobInfo],
        nodes: &[NodeSpec],
        seed: u64,
    ) -> SearchResult {
        let num_jobs = jobs.len();
        let num_nodes = nodes.len();
        let fair = fair_share(jobs, nodes).expect("cluster provides demanded resources");
        let mut eval = FitnessEvaluator::new(jobs, fair, self.cfg.fitness);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = Problem::new(jobs, nodes, &self.cfg.fitness);

        let base: Vec<u32> = jobs
            .iter()
            .flat_map(|j| j.current_allocation.gpus_per_node().iter().copied())
            .collect();

        // Seed the population from the previous round where job ids match,
        // falling back to the incumbent state.
        let pop_size = self.cfg.population.max(2);
        let mut population: Vec<Vec<u32>> = Vec::with_capacity(pop_size);
        if let Some(warm) = self
            .warm
            .take()
            .filter(|w| w.num_nodes == num_nodes && !w.population.is_empty())
        {
            let index_of: std::collections::BTreeMap<&str, usize> = warm
                .job_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), i))
                .collect();
            for old in warm.population.iter().take(pop_size) {
                let mut state = base.clone();
                for (j, job) in jobs.iter().enumerate() {
                    if let Some(&oj) = index_of.get(job.id.as_str()) {
                        state[j * num_nodes..(j + 1) * num_nodes]
                            .copy_from_slice(&old[oj * num_nodes..(oj + 1) * num_nodes]);
                    }
                }
                problem.repair(&mut state, &mut rng);
                population.push(state);
            }
        }
        while population.len() < pop_size {
            population.push(base.clone());
        }

        let mut scores: Vec<f64> = population
            .iter()
            .map(|s| eval.fitness_flat(s, num_nodes))
            .collect();

        for _ in 0..self.cfg.generations {
            // Random mating pairs over the current population.
            let mut order: Vec<usize> = (0..population.len()).collect();
            order.shuffle(&mut rng);
            let mut offspring: Vec<Vec<u32>> = Vec::with_capacity(pop_size);
            for pair in order.chunks(2) {
                let (a, b) = (pair[0], pair[1 % pair.len()]);
                let point = rng.gen_range(0..num_jobs.max(1));
                let (mut c1, mut c2) = crossover(
                    &population[a],
                    &population[b],
                    point,
                    num_nodes,
                );
                problem.mutate(&mut c1, &base, &mut rng);
                problem.mutate(&mut c2, &base, &mut rng);
                problem.repair(&mut c1, &mut rng);
                problem.repair(&mut c2, &mut rng);
                offspring.push(c1);
                offspring.push(c2);
            }
            for child in offspring {
                let score = eval.fitness_flat(&child, num_nodes);
                population.push(child);
                scores.push(score);
            }
            // Elitist truncation, stable in the current order.
            let mut idx: Vec<usize> = (0..population.len()).collect();
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(pop_size);
            idx.sort_unstable();
            let mut next_pop = Vec::with_capacity(pop_size);
            let mut next_scores = Vec::with_capacity(pop_size);
            for i in idx {
                next_pop.push(std::mem::take(&mut population[i]));
                next_scores.push(scores[i]);
            }
            population = next_pop;
            scores = next_scores;
        }

        // The search result never regresses below the incumbent state or an
        // all-pending matrix.
        let zeros = vec![0u32; num_jobs * num_nodes];
        let mut best_state = base.clone();
        let mut best_score = eval.fitness_flat(&base, num_nodes);
        let zero_score = eval.fitness_flat(&zeros, num_nodes);
        if zero_score > best_score {
            best_state = zeros;
            best_score = zero_score;
        }
        for (state, score) in population.iter().zip(&scores) {
            if *score > best_score {
                best_state = state.clone();
                best_score = *score;
            }
        }

        let population_objectives: Vec<(f64, f64)> = if self.cfg.collect_objectives {
            population
                .iter()
                .zip(&scores)
                .map(|(s, &f)| (f, cluster_utility(jobs, nodes, &to_matrix(s, num_nodes))))
                .collect()
        } else {
            Vec::new()
        };

        self.warm = Some(WarmState {
            job_ids: jobs.iter().map(|j| j.id.clone()).collect(),
            num_nodes,
            population,
        });

        let matrix = to_matrix(&best_state, num_nodes);
        debug_assert!(validate_matrix(jobs, nodes, &matrix, &self.cfg.fitness).is_ok());
        let utility = cluster_utility(jobs, nodes, &matrix);
        SearchResult {
            matrix,
            fitness: best_score,
            utility,
            population_objectives,
        }
    }
}

fn to_matrix(state: &[u32], num_nodes: usize) -> AllocationMatrix {
    AllocationMatrix::new(
        state
            .chunks(num_nodes)
            .map(|row| AllocationVector::new(row.to_vec()))
            .collect(),
    )
}

fn crossover(a: &[u32], b: &[u32], point: usize, num_nodes: usize) -> (Vec<u32>, Vec<u32>) {
    let split = point * num_nodes;
    let mut c1 = a.to_vec();
    let mut c2 = b.to_vec();
    c1[split..].copy_from_slice(&b[split..]);
    c2[split..].copy_from_slice(&a[split..]);
    (c1, c2)
}

/// Static problem data shared by the genetic operators.
struct Problem<'a> {
    jobs: &'a [SchedJobInfo],
    nodes: &'a [NodeSpec],
    cfg: &'a FitnessConfig,
    rtypes: Vec<String>,
    /// Per (job, node): how many replicas fit capacity-wise on an empty node.
    max_replicas_node: Vec<Vec<u32>>,
}

impl<'a> Problem<'a> {
    fn new(jobs: &'a [SchedJobInfo], nodes: &'a [NodeSpec], cfg: &'a FitnessConfig) -> Self {
        let mut rtypes: Vec<String> = Vec::new();
        for job in jobs {
            for (rtype, demand) in &job.resources_per_replica {
                if *demand > 0 && !rtypes.contains(rtype) {
                    rtypes.push(rtype.clone());
                }
            }
        }
        rtypes.sort_unstable();
        let max_replicas_node = jobs
            .iter()
            .map(|job| {
                nodes
                    .iter()
                    .map(|node| {
                        job.resources_per_replica
                            .iter()
                            .filter(|(_, d)| **d > 0)
                            .map(|(r, d)| (node.capacity(r) / d) as u32)
                            .min()
                            .unwrap_or(0)
                    })
                    .collect()
            })
            .collect();
        Problem {
            jobs,
            nodes,
            cfg,
            rtypes,
            max_replicas_node,
        }
    }

    fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn mutate(&self, state: &mut [u32], base: &[u32], rng: &mut ChaCha8Rng) {
        let nn = self.num_nodes();
        // (1) Reset rows back to the incumbent state.
        for j in 0..self.jobs.len() {
            if rng.gen_bool(0.1) {
                state[j * nn..(j + 1) * nn].copy_from_slice(&base[j * nn..(j + 1) * nn]);
            }
        }
        // (2) Sparsely zero entries of some rows.
        for j in 0..self.jobs.len() {
            if rng.gen_bool(0.1) {
                for n in 0..nn {
                    if rng.gen_bool(0.1) {
                        state[j * nn + n] = 0;
                    }
                }
            }
        }
        // (3) Grow entries towards random feasible replica counts. Selection
        // probabilities are normalized per node so roughly one growth
        // happens per node with a boost for jobs already present there.
        let free = self.free_resources(state);
        for n in 0..nn {
            let fits: Vec<bool> = (0..self.jobs.len())
                .map(|j| self.replica_fits(j, &free[n]))
                .collect();
            let cnt1 = fits.iter().filter(|&&f| f).count() as f64;
            let cnt2 = (0..self.jobs.len())
                .filter(|&j| fits[j] && state[j * nn + n] > 0)
                .count() as f64;
            for j in 0..self.jobs.len() {
                let p1 = if fits[j] { 1.0 / cnt1.max(1.0) } else { 0.0 };
                let p2 = if fits[j] && state[j * nn + n] > 0 {
                    1.0 / cnt2.max(1.0)
                } else {
                    0.0
                };
                let p = p1 + p2 - p1 * p2;
                if p > 0.0 && rng.gen_bool(p.min(1.0)) {
                    let cur = state[j * nn + n];
                    let cap = self.max_replicas_node[j][n].max(cur);
                    state[j * nn + n] = rng.gen_range(cur..=cap);
                }
            }
        }
    }

    fn free_resources(&self, state: &[u32]) -> Vec<Vec<i64>> {
        let nn = self.num_nodes();
        let mut free: Vec<Vec<i64>> = self
            .nodes
            .iter()
            .map(|node| {
                self.rtypes
                    .iter()
                    .map(|r| node.capacity(r) as i64)
                    .collect()
            })
            .collect();
        for (j, job) in self.jobs.iter().enumerate() {
            for n in 0..nn {
                let replicas = i64::from(state[j * nn + n]);
                if replicas == 0 {
                    continue;
                }
                for (r, rtype) in self.rtypes.iter().enumerate() {
                    let demand = job.resources_per_replica.get(rtype).copied().unwrap_or(0);
                    free[n][r] -= replicas * demand as i64;
                }
            }
        }
        free
    }

    fn replica_fits(&self, job: usize, free: &[i64]) -> bool {
        self.rtypes.iter().enumerate().all(|(r, rtype)| {
            let demand = self.jobs[job]
                .resources_per_replica
                .get(rtype)
                .copied()
                .unwrap_or(0) as i64;
            demand <= free[r].max(0)
        }) && self
            .jobs[job]
            .resources_per_replica
            .values()
            .any(|d| *d > 0)
    }

    /// Restore feasibility in place. Pinned jobs keep their incumbent rows
    /// and have first claim on every constraint.
    fn repair(&self, state: &mut [u32], rng: &mut ChaCha8Rng) {
        let nn = self.num_nodes();
        let nj = self.jobs.len();

        // Pinned jobs keep their current allocation verbatim.
        for (j, job) in self.jobs.iter().enumerate() {
            if job.pinned {
                state[j * nn..(j + 1) * nn].copy_from_slice(job.current_allocation.gpus_per_node());
            }
        }

        // At most one distributed job per node; pinned occupants win.
        if self.cfg.interference_avoidance {
            let distributed: Vec<bool> = (0..nj)
                .map(|j| {
                    state[j * nn..(j + 1) * nn]
                        .iter()
                        .filter(|&&g| g > 0)
                        .count()
                        > 1
                })
                .collect();
            for n in 0..nn {
                let mut taken = (0..nj)
                    .any(|j| self.jobs[j].pinned && distributed[j] && state[j * nn + n] > 0);
                for j in 0..nj {
                    if self.jobs[j].pinned || !distributed[j] || state[j * nn + n] == 0 {
                        continue;
                    }
                    if taken {
                        state[j * nn + n] = 0;
                    } else {
                        taken = true;
                    }
                }
            }
        }

        // Per-job replica cap and node-spread cap, consuming nodes in a
        // random order so no node is systematically preferred.
        let mut node_order: Vec<usize> = (0..nn).collect();
        for (j, job) in self.jobs.iter().enumerate() {
            if job.pinned {
                continue;
            }
            node_order.shuffle(rng);
            let mut replicas_left = job.max_replicas;
            let mut nodes_left = self.cfg.max_nodes_per_job;
            for &n in &node_order {
                let g = state[j * nn + n];
                if g == 0 {
                    continue;
                }
                let grant = g.min(replicas_left);
                let grant = if nodes_left == 0 { 0 } else { grant };
                state[j * nn + n] = grant;
                if grant > 0 {
                    replicas_left -= grant;
                    nodes_left -= 1;
                }
            }
        }

        // Node capacities: pinned rows are reserved first, then jobs in
        // order water-fill what remains.
        let mut free: Vec<Vec<i64>> = self
            .nodes
            .iter()
            .map(|node| {
                self.rtypes
                    .iter()
                    .map(|r| node.capacity(r) as i64)
                    .collect()
            })
            .collect();
        for (j, job) in self.jobs.iter().enumerate() {
            if !job.pinned {
                continue;
            }
            for n in 0..nn {
                let replicas = i64::from(state[j * nn + n]);
                for (r, rtype) in self.rtypes.iter().enumerate() {
                    let demand = job.resources_per_replica.get(rtype).copied().unwrap_or(0);
                    free[n][r] -= replicas * demand as i64;
                }
            }
        }
        for (j, job) in self.jobs.iter().enumerate() {
            if job.pinned {
                continue;
            }
            for n in 0..nn {
                let want = i64::from(state[j * nn + n]);
                if want == 0 {
                    continue;
                }
                let mut grant = want;
                for (r, rtype) in self.rtypes.iter().enumerate() {
                    let demand =
                        job.resources_per_replica.get(rtype).copied().unwrap_or(0) as i64;
                    if demand > 0 {
                        grant = grant.min(free[n][r].max(0) / demand);
                    }
                }
                state[j * nn + n] = grant as u32;
                for (r, rtype) in self.rtypes.iter().enumerate() {
                    let demand =
                        job.resources_per_replica.get(rtype).copied().unwrap_or(0) as i64;
                    free[n][r] -= grant * demand;
                }
            }
        }

        // Rows that ended below their minimum become pending.
        for (j, job) in self.jobs.iter().enumerate() {
            if job.pinned {
                continue;
            }
            let total: u32 = state[j * nn..(j + 1) * nn].iter().sum();
            if total > 0 && total < job.min_replicas {
                state[j * nn..(j + 1) * nn].fill(0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goodput::ThroughputParams;
    use crate::GoodputModel;

    fn model(phi: f64, init: u64, sync_node: f64) -> GoodputModel {
        GoodputModel::new(
            ThroughputParams {
                alpha_grad: 0.02,
                beta_grad: 0.001,
                alpha_sync_local: 0.02,
                beta_sync_local: 0.002,
                alpha_sync_node: sync_node,
                beta_sync_node: 0.01,
                gamma: 1.5,
            },
            phi,
            init,
        )
        .with_max_batch(init * 32)
        .with_max_per_gpu_batch(256)
    }

    fn job(id: &str, phi: f64, num_nodes: usize) -> SchedJobInfo {
        let mut j = SchedJobInfo::new(id, model(phi, 32, 0.1), num_nodes);
        j.age_seconds = 600.0;
        j.max_replicas = 64;
        j
    }

    #[test]
    fn single_scalable_job_gets_the_node() {
        // One job, one 4-GPU node, scalable profile: brute force over the
        // five possible allocations says take all four GPUs.
        let nodes = vec![NodeSpec::gpus(4)];
        let jobs = vec![job("a", 1e9, 1)];
        let cfg = SearchConfig {
            population: 30,
            generations: 20,
            ..Default::default()
        };
        let result = GeneticSearch::new(cfg).search(&jobs, &nodes, 7);
        assert_eq!(result.matrix.row(0).total_gpus(), 4);

        let mut best = f64::NEG_INFINITY;
        let mut best_g = 0;
        for g in 0..=4u32 {
            let m = AllocationMatrix::new(vec![vec![g].into()]);
            let f = super::super::fitness(&jobs, &nodes, &m, &cfg.fitness);
            if f > best {
                best = f;
                best_g = g;
            }
        }
        assert_eq!(best_g, 4);
        assert!((result.fitness - best).abs() <= 1e-9 * best.abs());
    }

    #[test]
    fn two_jobs_split_two_single_gpu_nodes() {
        let nodes = vec![NodeSpec::gpus(1), NodeSpec::gpus(1)];
        let jobs = vec![job("a", 100.0, 2), job("b", 100.0, 2)];
        let cfg = SearchConfig {
            population: 40,
            generations: 25,
            ..Default::default()
        };
        let result = GeneticSearch::new(cfg).search(&jobs, &nodes, 3);
        assert_eq!(result.matrix.row(0).total_gpus(), 1);
        assert_eq!(result.matrix.row(1).total_gpus(), 1);
    }

    #[test]
    fn pinned_job_keeps_its_row() {
        let nodes = vec![NodeSpec::gpus(2), NodeSpec::gpus(2)];
        let mut pinned = job("p", 1e6, 2);
        pinned.pinned = true;
        pinned.current_allocation = vec![2, 0].into();
        let other = job("q", 1e6, 2);
        let jobs = vec![pinned, other];
        let cfg = SearchConfig {
            population: 30,
            generations: 15,
            ..Default::default()
        };
        for seed in 0..5 {
            let result = GeneticSearch::new(cfg).search(&jobs, &nodes, seed);
            assert_eq!(result.matrix.row(0).gpus_per_node(), &[2, 0]);
        }
    }

    #[test]
    fn search_is_deterministic() {
        let nodes = vec![NodeSpec::gpus(4), NodeSpec::gpus(4)];
        let jobs = vec![job("a", 500.0, 2), job("b", 40.0, 2), job("c", 2000.0, 2)];
        let cfg = SearchConfig::default();
        let a = GeneticSearch::new(cfg).search(&jobs, &nodes, 42);
        let b = GeneticSearch::new(cfg).search(&jobs, &nodes, 42);
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.fitness, b.fitness);
    }

    #[test]
    fn warm_start_remaps_rows_by_job_id() {
        let nodes = vec![NodeSpec::gpus(4)];
        let mut search = GeneticSearch::new(SearchConfig {
            population: 20,
            generations: 10,
            ..Default::default()
        });
        let jobs = vec![job("a", 1e9, 1), job("b", 1e9, 1)];
        let first = search.search(&jobs, &nodes, 1);
        assert!(first.fitness > 0.0);
        // Job "a" finishes; "c" arrives. The warm population must not panic
        // or misalign rows.
        let jobs2 = vec![job("b", 1e9, 1), job("c", 1e9, 1)];
        let second = search.search(&jobs2, &nodes, 2);
        assert_eq!(second.matrix.num_jobs(), 2);
    }

    #[test]
    fn scaling_all_models_preserves_argmax() {
        // Speedups are ratios: scaling every job's iteration time by a
        // common factor rescales goodputs but not the fitness landscape.
        let nodes = vec![NodeSpec::gpus(2), NodeSpec::gpus(2)];
        let jobs: Vec<SchedJobInfo> = vec![job("a", 200.0, 2), job("b", 3000.0, 2)];
        let mut scaled_jobs = jobs.clone();
        for j in &mut scaled_jobs {
            let p = &mut j.goodput_model.params;
            for c in [
                &mut p.alpha_grad,
                &mut p.beta_grad,
                &mut p.alpha_sync_local,
                &mut p.beta_sync_local,
                &mut p.alpha_sync_node,
                &mut p.beta_sync_node,
            ] {
                *c *= 4.0;
            }
        }
        let cfg = FitnessConfig::default();
        for rows in [
            vec![vec![2, 0], vec![0, 2]],
            vec![vec![1, 0], vec![0, 1]],
            vec![vec![1, 1], vec![0, 0]],
            vec![vec![0, 0], vec![2, 2]],
        ] {
            let m = AllocationMatrix::new(rows.into_iter().map(Into::into).collect());
            let f1 = super::super::fitness(&jobs, &nodes, &m, &cfg);
            let f2 = super::super::fitness(&scaled_jobs, &nodes, &m, &cfg);
            assert!(
                (f1 - f2).abs() <= 1e-9 * f1.abs().max(1e-12),
                "{f1} vs {f2}"
            );
        }
    }
}
