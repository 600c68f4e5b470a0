//! World state and the simulation loop.
//!
//! Time advances in fixed ticks, but between boundaries (agent reports,
//! scheduling rounds, restart-delay expiries, completions) every running
//! job's progress rate is constant, so the loop advances whole chunks of
//! ticks in closed form. Progress within a segment is anchored at the
//! segment start, which makes trajectories exactly reproducible regardless
//! of how the chunks are cut.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fitting::{fit_throughput, ExplorationState, ProfilePoint};
use crate::goodput::{optimize_batch_config, scale_lr, AllocationVector, BatchConfig};
use crate::sched::{
    optimus_policy, tiresias_policy, validate_matrix, AllocationMatrix, FitnessConfig,
    GeneticSearch, NodeSpec, SchedJobInfo, SearchConfig,
};
use crate::workload::{Category, ConfigMode, JobSpec, WorkloadSpec};
use crate::{GoodputModel, LrScaleRule, ThroughputParams};

use super::metrics::{JobMetrics, MetricsReport};
use super::profiles::ProfileLibrary;
use super::{Policy, SimConfig, SimError};

/// Simulator-side lifecycle record of one job.
#[derive(Debug, Clone)]
pub struct JobState {
    pub id: String,
    pub model: String,
    pub submit_s: u64,
    pub category: Category,
    pub mode: ConfigMode,
    pub fixed_gpus: Option<u32>,
    pub fixed_batch: Option<u64>,

    pub allocation: AllocationVector,
    pub batch: Option<BatchConfig>,
    /// Progress in statistical epochs; never decreases.
    pub progress_epochs: f64,
    pub restarts: u32,
    pub restart_delay_left: u64,
    pub started_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub attained_gpu_seconds: f64,
    /// Examples processed, total and weighted by statistical efficiency.
    pub total_examples: f64,
    pub useful_examples: f64,
    /// Latest gradient-noise-scale reading.
    pub phi: f64,
    /// Latest learning-rate multiplier the agent would apply.
    pub last_lr_scale: f64,

    exploration: ExplorationState,
    /// Observed iteration times keyed by (nodes, gpus, per-GPU batch, accum).
    observations: BTreeMap<(u32, u32, u32, u32), f64>,
    fitted: Option<ThroughputParams>,
    fit_dirty: bool,

    /// Cached per-segment rates (valid until the next re-anchor).
    rate_per_second: f64,
    examples_per_second: f64,
    pub(crate) efficiency: f64,
}

impl JobState {
    fn new(spec: &JobSpec, num_nodes: usize) -> Self {
        JobState {
            id: spec.id.clone(),
            model: spec.model.clone(),
            submit_s: spec.submit_s,
            category: spec.category,
            mode: spec.mode,
            fixed_gpus: spec.gpus,
            fixed_batch: spec.batch_size,
            allocation: AllocationVector::empty(num_nodes),
            batch: None,
            progress_epochs: 0.0,
            restarts: 0,
            restart_delay_left: 0,
            started_at: None,
            completed_at: None,
            attained_gpu_seconds: 0.0,
            total_examples: 0.0,
            useful_examples: 0.0,
            phi: 0.0,
            last_lr_scale: 1.0,
            exploration: ExplorationState::new(),
            observations: BTreeMap::new(),
            fitted: None,
            fit_dirty: false,
            rate_per_second: 0.0,
            examples_per_second: 0.0,
            efficiency: 1.0,
        }
    }

    pub fn done(&self) -> bool {
        self.completed_at.is_some()
    }

    fn running(&self) -> bool {
        self.started_at.is_some() && !self.done() && !self.allocation.is_idle()
    }

    fn realized_batch(&self) -> Option<u64> {
        let batch = self.batch?;
        let k = u64::from(self.allocation.total_gpus());
        if k == 0 {
            return None;
        }
        Some(k * u64::from(batch.per_gpu_batch) * (u64::from(batch.accum_steps) + 1))
    }
}

/// The cluster, all jobs, and the policy state.
pub struct World {
    cfg: SimConfig,
    profiles: ProfileLibrary,
    nodes: Vec<NodeSpec>,
    pub now: u64,
    jobs: Vec<JobState>,
    search: GeneticSearch,
    rng: ChaCha8Rng,
    /// Suppresses scheduling entirely (isolated runs pin the allocation).
    static_allocation: bool,
}

impl World {
    pub fn new(
        workload: &WorkloadSpec,
        profiles: &ProfileLibrary,
        cfg: SimConfig,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        for job in &workload.jobs {
            profiles.get(&job.model)?;
        }
        let nodes: Vec<NodeSpec> = (0..cfg.num_nodes)
            .map(|_| NodeSpec::gpus(cfg.gpus_per_node))
            .collect();
        let search = GeneticSearch::new(SearchConfig {
            population: cfg.search_population,
            generations: cfg.search_generations,
            fitness: FitnessConfig {
                p: cfg.fairness_p,
                realloc_delay: cfg.realloc_delay as f64,
                interference_avoidance: cfg.interference_avoidance,
                max_nodes_per_job: 16,
            },
            collect_objectives: false,
        });
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(World {
            profiles: profiles.clone(),
            nodes,
            now: 0,
            jobs: workload.jobs.iter().map(|j| JobState::new(j, cfg.num_nodes)).collect(),
            search,
            rng,
            static_allocation: false,
            cfg,
        })
    }

    pub fn jobs(&self) -> &[JobState] {
        &self.jobs
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn all_done(&self) -> bool {
        self.jobs.iter().all(|j| j.done())
    }

    /// Indices of jobs visible to the scheduler right now.
    pub fn active_jobs(&self) -> Vec<usize> {
        (0..self.jobs.len())
            .filter(|&i| self.jobs[i].submit_s <= self.now && !self.jobs[i].done())
            .collect()
    }

    /// Disable the scheduling loop; allocations are managed by the caller.
    pub(crate) fn set_static_allocation(&mut self, v: bool) {
        self.static_allocation = v;
    }

    /// Hand a job a specific allocation directly (isolated runs and the
    /// autoscaler). `first` marks the initial placement, which is free;
    /// later changes count a restart and pay the delay.
    pub(crate) fn force_allocation(&mut self, idx: usize, alloc: AllocationVector, first: bool) {
        {
            let job = &mut self.jobs[idx];
            if first {
                job.started_at = Some(self.now);
            } else {
                job.restarts += 1;
                if !alloc.is_idle() {
                    job.restart_delay_left = self.cfg.realloc_delay;
                }
            }
            job.allocation = alloc.clone();
        }
        if !alloc.is_idle() {
            self.jobs[idx].exploration.observe(&alloc);
            self.jobs[idx].batch = self.choose_batch(idx, &alloc);
        } else {
            self.jobs[idx].batch = None;
        }
        self.reanchor_all();
    }

    /// 1 / (1 - slowdown) for distributed jobs sharing a node with another
    /// distributed job, 1 otherwise.
    fn interference_multiplier(&self, idx: usize) -> f64 {
        if self.cfg.interference_slowdown <= 0.0 {
            return 1.0;
        }
        let job = &self.jobs[idx];
        if job.done() || job.allocation.occupied_nodes() < 2 {
            return 1.0;
        }
        let slowed = self.jobs.iter().enumerate().any(|(k, other)| {
            k != idx
                && !other.done()
                && other.allocation.occupied_nodes() >= 2
                && other
                    .allocation
                    .gpus_per_node()
                    .iter()
                    .zip(job.allocation.gpus_per_node())
                    .any(|(&a, &b)| a > 0 && b > 0)
        });
        if slowed {
            1.0 / (1.0 - self.cfg.interference_slowdown)
        } else {
            1.0
        }
    }

    /// Re-derive a job's progress rate from its allocation, batch
    /// configuration, noise scale, and interference state.
    fn reanchor(&mut self, idx: usize) {
        let mult = self.interference_multiplier(idx);
        let job = &self.jobs[idx];
        let profile = &self.profiles.models[&job.model];
        let (rate, examples, eff) = match (job.running(), job.batch, job.realized_batch()) {
            (true, Some(batch), Some(total)) => {
                let t = profile.interp_t_iter(
                    job.allocation.occupied_nodes(),
                    job.allocation.total_gpus(),
                    batch.per_gpu_batch,
                    batch.accum_steps,
                ) * mult;
                let eff = ((job.phi + profile.m0 as f64) / (job.phi + total as f64)).min(1.0);
                let examples = total as f64 / t;
                let rate = eff * total as f64 / (profile.dataset_size as f64 * t);
                (rate, examples, eff)
            }
            _ => (0.0, 0.0, 1.0),
        };
        let job = &mut self.jobs[idx];
        job.rate_per_second = rate;
        job.examples_per_second = examples;
        job.efficiency = eff;
    }

    fn reanchor_all(&mut self) {
        for i in 0..self.jobs.len() {
            self.reanchor(i);
        }
    }

    /// Advance every job by `ticks` ticks; restart delays elapse first.
    fn advance_ticks(&mut self, ticks: u64) {
        let dt = self.cfg.tick_seconds as f64;
        for job in &mut self.jobs {
            if job.done() || job.allocation.is_idle() || job.started_at.is_none() {
                continue;
            }
            job.attained_gpu_seconds +=
                f64::from(job.allocation.total_gpus()) * ticks as f64 * dt;
            let delay = job.restart_delay_left.min(ticks);
            job.restart_delay_left -= delay;
            let active = (ticks - delay) as f64 * dt;
            if active > 0.0 && job.rate_per_second > 0.0 {
                job.progress_epochs += job.rate_per_second * active;
                job.total_examples += job.examples_per_second * active;
                job.useful_examples += job.examples_per_second * job.efficiency * active;
            }
        }
        self.now += ticks * self.cfg.tick_seconds;
    }

    /// Ticks until this job first reaches its completion target, if it is
    /// progressing.
    fn ticks_to_completion(&self, idx: usize) -> Option<u64> {
        let job = &self.jobs[idx];
        if job.done() || !job.running() || job.rate_per_second <= 0.0 {
            return None;
        }
        let target = self.profiles.models[&job.model].target_epochs;
        let need = target - job.progress_epochs - 1e-9;
        if need <= 0.0 {
            return Some(job.restart_delay_left.max(1));
        }
        let per_tick = job.rate_per_second * self.cfg.tick_seconds as f64;
        let ticks = (need / per_tick).ceil();
        if !ticks.is_finite() || ticks > 1e17 {
            return None;
        }
        Some(job.restart_delay_left + (ticks as u64).max(1))
    }

    fn process_completions(&mut self) -> bool {
        let mut any = false;
        for i in 0..self.jobs.len() {
            let target = self.profiles.models[&self.jobs[i].model].target_epochs;
            let job = &mut self.jobs[i];
            if !job.done() && job.started_at.is_some() && job.progress_epochs >= target - 1e-9 {
                job.completed_at = Some(self.now);
                job.progress_epochs = target;
                let nodes = job.allocation.num_nodes();
                job.allocation = AllocationVector::empty(nodes);
                job.batch = None;
                any = true;
            }
        }
        if any {
            self.reanchor_all();
        }
        any
    }

    /// Advance to `target` (an absolute time), cutting chunks at completion
    /// times so no event happens inside a chunk.
    pub fn advance_until(&mut self, target: u64) {
        while self.now < target {
            let mut chunk = (target - self.now) / self.cfg.tick_seconds;
            for i in 0..self.jobs.len() {
                if let Some(t) = self.ticks_to_completion(i) {
                    chunk = chunk.min(t);
                }
            }
            self.advance_ticks(chunk.max(1));
            self.process_completions();
        }
    }

    /// The scheduler's view of a job's goodput model: fitted parameters (or
    /// the perfect-scaling prior) plus the latest noise-scale reading.
    pub fn agent_model(&self, idx: usize) -> GoodputModel {
        let job = &self.jobs[idx];
        let profile = &self.profiles.models[&job.model];
        let params = job.fitted.unwrap_or(ThroughputParams {
            alpha_grad: 0.0,
            beta_grad: 1.0 / profile.m0 as f64,
            alpha_sync_local: 0.0,
            beta_sync_local: 0.0,
            alpha_sync_node: 0.0,
            beta_sync_node: 0.0,
            gamma: 1.0,
        });
        let (init, non_adaptive) = match job.fixed_batch {
            Some(b) => (b, true),
            None => (profile.m0, false),
        };
        let mut model = GoodputModel::new(params, job.phi, init)
            .with_max_batch(profile.max_batch.max(init))
            .with_max_per_gpu_batch(profile.max_per_gpu_batch);
        if non_adaptive {
            model = model.non_adaptive();
        }
        model
    }

    /// Pick the batch configuration the agent would use on `alloc`.
    fn choose_batch(&self, idx: usize, alloc: &AllocationVector) -> Option<BatchConfig> {
        let model = self.agent_model(idx);
        match optimize_batch_config(&model, alloc) {
            Ok((batch, _)) => Some(batch),
            Err(e) => {
                log::warn!("job {}: no feasible batch on {:?}: {e}", self.jobs[idx].id, alloc);
                None
            }
        }
    }

    /// Periodic agent work for one job: record an observation, refit the
    /// throughput model if anything new arrived, refresh the noise scale,
    /// and re-tune the batch configuration.
    fn agent_report(&mut self, idx: usize) {
        if !self.jobs[idx].running() || self.jobs[idx].restart_delay_left > 0 {
            return;
        }
        let mult = self.interference_multiplier(idx);
        let job = &self.jobs[idx];
        let profile = &self.profiles.models[&job.model];
        let batch = match job.batch {
            Some(b) => b,
            None => return,
        };
        let key = (
            job.allocation.occupied_nodes(),
            job.allocation.total_gpus(),
            batch.per_gpu_batch,
            batch.accum_steps,
        );
        let observed = profile.interp_t_iter(key.0, key.1, key.2, key.3) * mult;
        let phi = profile.interp_phi(
            job.progress_epochs,
            job.realized_batch().unwrap_or(profile.m0),
        );
        let m0 = profile.m0;

        let job = &mut self.jobs[idx];
        if job.observations.insert(key, observed).is_none() {
            job.fit_dirty = true;
        }
        job.phi = phi;
        let t_fit = std::time::Instant::now();
        let mut fitted_now = false;
        if job.fit_dirty {
            let points: Vec<ProfilePoint> = job
                .observations
                .iter()
                .map(|(&(nodes, gpus, m, s), &t)| {
                    ProfilePoint::new(
                        AllocationVector::from_shape(nodes, gpus),
                        BatchConfig::new(m, s),
                        t,
                    )
                })
                .collect();
            if let Ok(report) = fit_throughput(&points, &job.exploration, job.fitted.as_ref()) {
                job.fitted = Some(report.params);
            }
            job.fit_dirty = false;
            fitted_now = true;
        }
        if fitted_now && std::env::var("SIM_PROF").is_ok() {
            eprintln!("PROF fit t={} job={} pts={} us={}", self.now, self.jobs[idx].id,
                self.jobs[idx].observations.len(), t_fit.elapsed().as_micros());
        }

        // Re-tune the batch configuration for the current allocation and log
        // the learning-rate multiplier the new batch implies.
        let alloc = self.jobs[idx].allocation.clone();
        if let Some(batch) = self.choose_batch(idx, &alloc) {
            let job = &mut self.jobs[idx];
            if job.batch != Some(batch) {
                job.batch = Some(batch);
            }
            if let Some(total) = job.realized_batch() {
                let rule = LrScaleRule::AdaScale { pgns: Some(job.phi) };
                if let Ok(lambda) = scale_lr(&rule, m0, total.max(m0)) {
                    job.last_lr_scale = lambda;
                    log::debug!("job {} lr scale {lambda:.4} at batch {total}", job.id);
                }
            }
        }
        self.reanchor(idx);
    }

    pub fn agent_reports(&mut self) {
        for i in 0..self.jobs.len() {
            self.agent_report(i);
        }
    }

    /// Build the scheduler's job list (indices parallel `SchedJobInfo`s).
    fn sched_jobs(&self) -> (Vec<usize>, Vec<SchedJobInfo>) {
        let active = self.active_jobs();
        let cluster_gpus = self.cfg.num_nodes as u64 * self.cfg.gpus_per_node;
        let infos = active
            .iter()
            .map(|&i| {
                let job = &self.jobs[i];
                let profile = &self.profiles.models[&job.model];
                let mut info = SchedJobInfo::new(job.id.clone(), self.agent_model(i), self.cfg.num_nodes);
                info.age_seconds = (self.now - job.submit_s) as f64;
                info.num_restarts = job.restarts;
                info.current_allocation = job.allocation.clone();
                info.started = job.started_at.is_some();
                info.attained_gpu_seconds = job.attained_gpu_seconds;
                match self.cfg.policy {
                    Policy::Pollux => {
                        let cap = u64::from(job.exploration.allocation_cap());
                        info.max_replicas =
                            cap.min(cluster_gpus).min(profile.max_batch) as u32;
                    }
                    Policy::Tiresias => {
                        let want =
                            u64::from(job.fixed_gpus.unwrap_or(1)).min(cluster_gpus) as u32;
                        info.requested_replicas = Some(want);
                        info.max_replicas = want;
                    }
                    Policy::Optimus => {
                        let batch = job.fixed_batch.unwrap_or(profile.m0);
                        info.max_replicas = cluster_gpus.min(batch) as u32;
                        let eff = ((job.phi + profile.m0 as f64)
                            / (job.phi + batch as f64))
                            .min(1.0);
                        let remaining = (profile.target_epochs - job.progress_epochs).max(0.0);
                        info.remaining_iterations = Some(
                            remaining * profile.dataset_size as f64 / (eff * batch as f64),
                        );
                    }
                }
                info
            })
            .collect();
        (active, infos)
    }

    /// One scheduling round: run the policy and apply its matrix.
    pub fn schedule_round(&mut self) -> Result<(), SimError> {
        if self.static_allocation {
            return Ok(());
        }
        let t_round = std::time::Instant::now();
        let (active, infos) = self.sched_jobs();
        if active.is_empty() {
            return Ok(());
        }
        let t_infos = t_round.elapsed();
        let matrix = match self.cfg.policy {
            Policy::Pollux => {
                let seed = self.rng.gen::<u64>();
                self.search.search(&infos, &self.nodes, seed).matrix
            }
            Policy::Tiresias => {
                tiresias_policy(&infos, &self.nodes, self.cfg.tiresias_threshold_gpu_hours)
            }
            Policy::Optimus => optimus_policy(&infos, &self.nodes),
        };
        let check_cfg = FitnessConfig {
            p: self.cfg.fairness_p,
            realloc_delay: self.cfg.realloc_delay as f64,
            // Only the goodput-driven policy honors the constraint.
            interference_avoidance: matches!(self.cfg.policy, Policy::Pollux)
                && self.cfg.interference_avoidance,
            max_nodes_per_job: 16,
        };
        validate_matrix(&infos, &self.nodes, &matrix, &check_cfg)
            .map_err(|e| SimError::InfeasibleMatrix(e.to_string()))?;
        let t_search = t_round.elapsed();
        self.apply(&matrix, &active);
        if std::env::var("SIM_PROF").is_ok() {
            eprintln!("PROF round t={} jobs={} infos_us={} search_us={} apply_us={}",
                self.now, active.len(), t_infos.as_micros(),
                (t_search - t_infos).as_micros(),
                (t_round.elapsed() - t_search).as_micros());
        }
        Ok(())
    }

    /// Apply an allocation matrix whose rows parallel `indices`. Changed
    /// rows incur a restart (and the restart delay while they hold GPUs);
    /// very first placements are free.
    fn apply(&mut self, matrix: &AllocationMatrix, indices: &[usize]) {
        for (row, &idx) in matrix.rows().iter().zip(indices) {
            let job = &self.jobs[idx];
            if &job.allocation == row {
                continue;
            }
            let first_start = job.started_at.is_none();
            if first_start && row.is_idle() {
                continue;
            }
            {
                let job = &mut self.jobs[idx];
                job.allocation = row.clone();
                if first_start {
                    job.started_at = Some(self.now);
                } else {
                    job.restarts += 1;
                    if !row.is_idle() {
                        job.restart_delay_left = self.cfg.realloc_delay;
                    }
                }
            }
            if row.is_idle() {
                self.jobs[idx].batch = None;
            } else {
                self.jobs[idx].exploration.observe(row);
                self.jobs[idx].batch = self.choose_batch(idx, row);
            }
        }
        self.reanchor_all();
    }

    pub fn boundary_after(&self, t: u64) -> u64 {
        let next = |interval: u64| (t / interval + 1) * interval;
        next(self.cfg.report_interval).min(next(self.cfg.sched_interval))
    }

    fn into_report(self) -> MetricsReport {
        let mut rows: Vec<JobMetrics> = self
            .jobs
            .into_iter()
            .map(|job| JobMetrics {
                job_id: job.id,
                category: job.category,
                submit_s: job.submit_s,
                start_s: job.started_at,
                complete_s: job.completed_at.unwrap_or(0),
                jct_s: job
                    .completed_at
                    .map(|c| (c - job.submit_s) as f64)
                    .unwrap_or(f64::NAN),
                restarts: job.restarts,
                rho: None,
            })
            .collect();
        rows.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        MetricsReport::new(rows)
    }
}

/// Advance the world by exactly one tick.
pub fn step(world: &mut World, dt: u64) -> Result<(), SimError> {
    if dt != world.cfg.tick_seconds {
        return Err(SimError::InvalidConfig(format!(
            "step size {dt} does not match the tick length {}",
            world.cfg.tick_seconds
        )));
    }
    world.advance_ticks(1);
    world.process_completions();
    Ok(())
}

/// Apply an allocation matrix covering the currently active jobs (rows in
/// [`World::active_jobs`] order), after validating feasibility.
pub fn apply_allocations(world: &mut World, matrix: &AllocationMatrix) -> Result<(), SimError> {
    let (active, infos) = world.sched_jobs();
    let check_cfg = FitnessConfig {
        interference_avoidance: world.cfg.interference_avoidance
            && matches!(world.cfg.policy, Policy::Pollux),
        ..FitnessConfig::default()
    };
    validate_matrix(&infos, &world.nodes, matrix, &check_cfg)
        .map_err(|e| SimError::InfeasibleMatrix(e.to_string()))?;
    world.apply(matrix, &active);
    Ok(())
}

/// Drive a workload to completion and report per-job metrics.
pub fn run(
    workload: &WorkloadSpec,
    profiles: &ProfileLibrary,
    cfg: &SimConfig,
) -> Result<MetricsReport, SimError> {
    let mut world = World::new(workload, profiles, cfg.clone())?;
    if world.jobs.is_empty() {
        return Ok(world.into_report());
    }
    world.schedule_round()?;
    while !world.all_done() {
        if world.now >= world.cfg.max_sim_seconds {
            return Err(SimError::TimeLimit(world.cfg.max_sim_seconds));
        }
        let boundary = world.boundary_after(world.now);
        world.advance_until(boundary);
        if world.all_done() {
            break;
        }
        if world.now % world.cfg.report_interval == 0 {
            world.agent_reports();
        }
        if world.now % world.cfg.sched_interval == 0 {
            world.schedule_round()?;
        }
    }
    Ok(world.into_report())
}

/// JCT of one job running alone on its 1/J partition of the cluster: the
/// fair node and GPU counts are carved out, fully granted at time zero, and
/// the job runs with the usual agent loop but no competing scheduler.
pub fn isolated_jct(
    job: &JobSpec,
    profiles: &ProfileLibrary,
    cfg: &SimConfig,
    total_jobs: usize,
) -> Result<f64, SimError> {
    let cluster_gpus = cfg.num_nodes as u64 * cfg.gpus_per_node;
    let j = total_jobs.max(1) as u64;
    let fair_replicas = cluster_gpus.div_ceil(j).max(1);
    let fair_nodes = (cfg.num_nodes as u64).div_ceil(j).max(1) as usize;

    let mut iso_cfg = cfg.clone();
    iso_cfg.num_nodes = fair_nodes;
    iso_cfg.gpus_per_node = fair_replicas.div_ceil(fair_nodes as u64).min(cfg.gpus_per_node);
    iso_cfg.interference_slowdown = 0.0;

    let mut spec = job.clone();
    spec.submit_s = 0;
    let partition_gpus = iso_cfg.num_nodes as u64 * iso_cfg.gpus_per_node;
    if let Some(g) = spec.gpus {
        spec.gpus = Some((u64::from(g)).min(partition_gpus) as u32);
    }
    let workload = WorkloadSpec { jobs: vec![spec] };

    let mut world = World::new(&workload, profiles, iso_cfg)?;
    world.static_allocation = true;
    // Grant the whole partition (or the job's fixed request) immediately.
    let grant = match world.jobs[0].fixed_gpus {
        Some(g) => u64::from(g).min(partition_gpus),
        None => partition_gpus,
    };
    let per_node = world.cfg.gpus_per_node;
    let mut remaining = grant;
    let row: Vec<u32> = (0..world.cfg.num_nodes)
        .map(|_| {
            let g = remaining.min(per_node);
            remaining -= g;
            g as u32
        })
        .collect();
    let alloc = AllocationVector::new(row);
    world.jobs[0].started_at = Some(0);
    world.jobs[0].allocation = alloc.clone();
    world.jobs[0].exploration.observe(&alloc);
    world.jobs[0].batch = world.choose_batch(0, &alloc);
    world.reanchor_all();

    while !world.all_done() {
        if world.now >= world.cfg.max_sim_seconds {
            return Err(SimError::TimeLimit(world.cfg.max_sim_seconds));
        }
        let boundary = world.boundary_after(world.now);
        world.advance_until(boundary);
        if world.all_done() {
            break;
        }
        if world.now % world.cfg.report_interval == 0 {
            world.agent_reports();
        }
    }
    Ok(world.jobs[0].completed_at.unwrap_or(0) as f64)
}
