//! Trace ingestion and synthetic workload construction.
//!
//! Jobs arrive from a trace carrying only a submission time, a GPU count,
//! and a duration. Each is bucketed by total GPU-time and mapped onto a
//! profiled model from the same bucket. Depending on the configuration mode,
//! the emitted job either lets the scheduler manage everything, or pins a
//! manually "tuned" GPU count and batch size (50-80% of ideal scalability),
//! or copies the trace GPU count with a proportionally scaled batch size.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ModelProfile, ProfileLibrary};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed trace row at line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("no profiled model in category {0}")]
    NoModelForCategory(Category),
    #[error("model {model} has no tuned configuration in the 50-80% scaling band")]
    NoTunedConfig { model: String },
}

/// GPU-time bucket; half-open bounds in GPU-hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Small,
    Medium,
    Large,
    XLarge,
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Category::Small => "small",
            Category::Medium => "medium",
            Category::Large => "large",
            Category::XLarge => "xlarge",
        };
        f.write_str(s)
    }
}

/// Bucket a job by its total GPU-time: [0,1) small, [1,10) medium,
/// [10,100) large, everything above extra-large.
pub fn categorize(gpu_time_hours: f64) -> Category {
    if gpu_time_hours < 1.0 {
        Category::Small
    } else if gpu_time_hours < 10.0 {
        Category::Medium
    } else if gpu_time_hours < 100.0 {
        Category::Large
    } else {
        Category::XLarge
    }
}

/// One job as recorded in a cluster trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceJob {
    pub submit_s: u64,
    pub gpus: u32,
    pub duration_s: u64,
}

impl TraceJob {
    pub fn gpu_time_hours(&self) -> f64 {
        f64::from(self.gpus) * self.duration_s as f64 / 3600.0
    }
}

/// Parse a trace CSV with header `submit_s,gpus,duration_s`, sorted by
/// submission time on the way in.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceJob>, WorkloadError> {
    let path_str = path.as_ref().display().to_string();
    let mut file = std::fs::File::open(path.as_ref()).map_err(|source| WorkloadError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut text = String::new();
    file.read_to_string(&mut text)
        .map_err(|source| WorkloadError::Io {
            path: path_str,
            source,
        })?;
    parse_trace(&text)
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceJob>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut jobs = Vec::new();
    for result in reader.deserialize::<TraceJob>() {
        match result {
            Ok(job) => jobs.push(job),
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(WorkloadError::MalformedRow {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    jobs.sort_by_key(|j| j.submit_s);
    Ok(jobs)
}

/// Serialize a trace back to CSV (the inverse of [`parse_trace`]).
pub fn trace_to_csv(jobs: &[TraceJob]) -> String {
    let mut out = String::from("submit_s,gpus,duration_s\n");
    for j in jobs {
        out.push_str(&format!("{},{},{}\n", j.submit_s, j.gpus, j.duration_s));
    }
    out
}

/// Target category mix: small 72%, medium 20%, large 6%, extra-large 2%.
const CATEGORY_MIX: [(Category, f64); 4] = [
    (Category::Small, 0.72),
    (Category::Medium, 0.20),
    (Category::Large, 0.06),
    (Category::XLarge, 0.02),
];

/// GPU-count choices per category, mirroring how larger trace jobs request
/// more GPUs.
fn gpu_choices(cat: Category) -> &'static [u32] {
    match cat {
        Category::Small => &[1, 1, 1, 2],
        Category::Medium => &[1, 2, 2, 4],
        Category::Large => &[2, 4, 4, 8],
        Category::XLarge => &[8, 16, 16, 32],
    }
}

/// Generate a synthetic trace: `num_jobs` arrivals spread over `duration_s`,
/// with GPU-times drawn log-normally inside each category bucket. Category
/// counts follow the target mix exactly (largest remainder), so emitted
/// fractions are within one job of the configured proportions.
pub fn generate_trace(seed: u64, num_jobs: usize, duration_s: u64) -> Vec<TraceJob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Largest-remainder apportionment of jobs to categories.
    let mut counts: Vec<(Category, usize, f64)> = CATEGORY_MIX
        .iter()
        .map(|&(c, f)| {
            let exact = f * num_jobs as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = counts.iter().map(|c| c.1).sum();
    while assigned < num_jobs {
        let i = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .2.partial_cmp(&b.1 .2).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        counts[i].1 += 1;
        counts[i].2 = -1.0;
        assigned += 1;
    }

    let mut categories: Vec<Category> = Vec::with_capacity(num_jobs);
    for (c, n, _) in counts {
        categories.extend(std::iter::repeat(c).take(n));
    }
    // Interleave categories across the arrival sequence.
    for i in (1..categories.len()).rev() {
        let j = rng.gen_range(0..=i);
        categories.swap(i, j);
    }

    let mut submits: Vec<u64> = (0..num_jobs)
        .map(|_| rng.gen_range(0..duration_s.max(1)))
        .collect();
    submits.sort_unstable();

    categories
        .into_iter()
        .zip(submits)
        .map(|(cat, submit_s)| {
            let (lo, hi) = match cat {
                Category::Small => (0.05, 1.0),
                Category::Medium => (1.0, 10.0),
                Category::Large => (10.0, 100.0),
                Category::XLarge => (100.0, 1000.0),
            };
            let mu = (f64::ln(lo) + f64::ln(hi)) / 2.0;
            let sigma = (f64::ln(hi) - f64::ln(lo)) / 4.0;
            let dist = LogNormal::new(mu, sigma).unwrap();
            let gpu_hours: f64 = dist.sample(&mut rng).clamp(lo, hi * 0.999);
            let choices = gpu_choices(cat);
            let gpus = choices[rng.gen_range(0..choices.len())];
            let duration_s = ((gpu_hours * 3600.0 / f64::from(gpus)).round() as u64).max(60);
            TraceJob {
                submit_s,
                gpus,
                duration_s,
            }
        })
        .collect()
}

/// How an emitted job is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigMode {
    /// Scheduler manages GPUs and batch size.
    Pollux,
    /// Fixed GPUs and batch size from the 50-80%-of-ideal scaling band.
    Tuned,
    /// GPUs copied from the trace; batch size is m0 times the GPU count.
    Realistic,
}

impl std::str::FromStr for ConfigMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pollux" => Ok(ConfigMode::Pollux),
            "tuned" => Ok(ConfigMode::Tuned),
            "realistic" => Ok(ConfigMode::Realistic),
            other => Err(format!("unknown workload mode {other:?}")),
        }
    }
}

/// One job of a concrete workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    pub submit_s: u64,
    pub model: String,
    pub category: Category,
    pub mode: ConfigMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gpus: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub batch_size: Option<u64>,
}

/// A fully specified workload, ready for simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub jobs: Vec<JobSpec>,
}

/// A (gpus, total batch) pair achieving 50-80% of ideal scalability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunedConfig {
    pub gpus: u32,
    pub total_batch: u64,
    /// Throughput relative to perfectly linear scaling from one GPU.
    pub scaling: f64,
}

/// Throughput of `model` running total batch `total` on `gpus` GPUs (packed
/// placement), per the interpolated profile; the batch is realized at the
/// smallest accumulation depth that fits memory.
fn profile_throughput(
    profile: &ModelProfile,
    gpus: u32,
    total: u64,
    gpus_per_node: u64,
) -> Option<f64> {
    let nodes = u64::from(gpus).div_ceil(gpus_per_node).max(1) as u32;
    for s in 0u32..=15 {
        let per_step = u64::from(gpus) * (u64::from(s) + 1);
        let m = total.div_ceil(per_step);
        if m == 0 || m > u64::from(profile.max_per_gpu_batch) {
            continue;
        }
        let realized = per_step * m;
        let t = profile.interp_t_iter(nodes, gpus, m as u32, s);
        if t > 0.0 {
            return Some(realized as f64 / t);
        }
    }
    None
}

/// All valid tuned configurations for one model: GPU counts whose optimal
/// batch size lands between 50% and 80% of perfectly linear scaling.
///
/// "Optimal batch size" is what a knowledgeable user who fully trained the
/// model at several batch sizes would pick: the one maximizing throughput
/// weighted by mid-training statistical efficiency (larger batches process
/// examples faster but contribute less progress each).
pub fn tuned_configs(
    profile: &ModelProfile,
    max_gpus: u32,
    gpus_per_node: u64,
) -> Vec<TunedConfig> {
    let batch_grid: Vec<u64> = {
        let mut g = Vec::new();
        let mut m = profile.m0;
        while m <= profile.max_batch {
            g.push(m);
            m *= 2;
        }
        if g.last() != Some(&profile.max_batch) {
            g.push(profile.max_batch);
        }
        g
    };
    let phi_mid = profile.interp_phi(profile.target_epochs / 2.0, profile.m0);
    let eff_mid = |total: u64| -> f64 {
        (phi_mid + profile.m0 as f64) / (phi_mid + total as f64)
    };
    let best = |gpus: u32| -> Option<(u64, f64)> {
        let mut best: Option<(u64, f64)> = None;
        for &total in &batch_grid {
            if let Some(thr) = profile_throughput(profile, gpus, total, gpus_per_node) {
                let value = thr * eff_mid(total);
                if best.map_or(true, |(_, v)| value > v) {
                    best = Some((total, value));
                }
            }
        }
        best
    };
    let ideal_unit = match best(1) {
        Some((_, v)) => v,
        None => return Vec::new(),
    };
    let mut configs = Vec::new();
    for gpus in 1..=max_gpus {
        if let Some((total_batch, value)) = best(gpus) {
            let scaling = value / (f64::from(gpus) * ideal_unit);
            if (0.5..=0.8).contains(&scaling) {
                configs.push(TunedConfig {
                    gpus,
                    total_batch,
                    scaling,
                });
            }
        }
    }
    configs
}

/// Map a trace onto profiled models: deterministic in `(trace, seed, mode)`.
pub fn synthesize(
    trace: &[TraceJob],
    profiles: &ProfileLibrary,
    seed: u64,
    mode: ConfigMode,
    gpus_per_node: u64,
) -> Result<WorkloadSpec, WorkloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Bucket the profiled models by their nominal single-GPU duration.
    let mut buckets: Vec<(Category, Vec<&str>)> = vec![
        (Category::Small, Vec::new()),
        (Category::Medium, Vec::new()),
        (Category::Large, Vec::new()),
        (Category::XLarge, Vec::new()),
    ];
    for (name, profile) in &profiles.models {
        let cat = categorize(profile.single_gpu_hours());
        buckets
            .iter_mut()
            .find(|(c, _)| *c == cat)
            .unwrap()
            .1
            .push(name);
    }

    let mut tuned_cache: std::collections::BTreeMap<&str, Vec<TunedConfig>> = Default::default();

    let mut jobs = Vec::with_capacity(trace.len());
    for (i, tj) in trace.iter().enumerate() {
        let cat = categorize(tj.gpu_time_hours());
        let candidates = &buckets.iter().find(|(c, _)| *c == cat).unwrap().1;
        if candidates.is_empty() {
            return Err(WorkloadError::NoModelForCategory(cat));
        }
        let model = candidates[rng.gen_range(0..candidates.len())];
        let profile = &profiles.models[model];
        let (gpus, batch_size) = match mode {
            ConfigMode::Pollux => (None, None),
            ConfigMode::Realistic => (Some(tj.gpus), Some(profile.m0 * u64::from(tj.gpus))),
            ConfigMode::Tuned => {
                let configs = tuned_cache
                    .entry(model)
                    .or_insert_with(|| tuned_configs(profile, 64, gpus_per_node));
                if configs.is_empty() {
                    return Err(WorkloadError::NoTunedConfig {
                        model: model.to_string(),
                    });
                }
                let pick = configs[rng.gen_range(0..configs.len())];
                (Some(pick.gpus), Some(pick.total_batch))
            }
        };
        jobs.push(JobSpec {
            id: format!("job-{i:04}"),
            submit_s: tj.submit_s,
            model: model.to_string(),
            category: cat,
            mode,
            gpus,
            batch_size,
        });
    }
    Ok(WorkloadSpec { jobs })
}
