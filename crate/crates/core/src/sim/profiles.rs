//! Measured job profiles and their interpolation.
//!
//! A profile library stores, per model, iteration times keyed by placement
//! and batch configuration plus gradient-noise-scale measurements keyed by
//! training progress and batch size. The simulator replays jobs by
//! piecewise-linear interpolation over those tables: each keyed dimension is
//! reduced in turn (nodes, GPUs, per-GPU batch, accumulation steps), and
//! queries outside the table clamp to the nearest face rather than
//! extrapolating.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::goodput::{AllocationVector, BatchConfig, ThroughputParams};

use super::SimError;

/// One measured iteration time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputEntry {
    pub nodes: u32,
    pub gpus: u32,
    pub per_gpu_batch: u32,
    pub accum_steps: u32,
    pub t_iter_seconds: f64,
}

/// One gradient-noise-scale measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgnsEntry {
    pub epoch: f64,
    pub total_batch: u64,
    pub phi: f64,
}

/// Everything the simulator knows about one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub throughput: Vec<ThroughputEntry>,
    pub pgns: Vec<PgnsEntry>,
    /// Training-set size in examples.
    pub dataset_size: u64,
    /// Initial (and baseline) total batch size.
    pub m0: u64,
    /// Largest total batch size the model tolerates.
    pub max_batch: u64,
    /// Largest per-GPU batch size that fits memory.
    pub max_per_gpu_batch: u32,
    /// Statistical epochs to completion.
    pub target_epochs: f64,
}

/// Profile tables for every model, keyed by model name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ProfileLibrary {
    pub models: BTreeMap<String, ModelProfile>,
}

impl ProfileLibrary {
    pub fn get(&self, model: &str) -> Result<&ModelProfile, SimError> {
        self.models
            .get(model)
            .ok_or_else(|| SimError::UnknownModel(model.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile library serializes")
    }
}

/// Iteration time for `model` under the given placement and batch
/// configuration, by multilinear interpolation over the profile table.
pub fn interpolate_throughput(
    lib: &ProfileLibrary,
    model: &str,
    alloc: &AllocationVector,
    batch: &BatchConfig,
) -> Result<f64, SimError> {
    let profile = lib.get(model)?;
    let gpus = alloc.total_gpus();
    if gpus == 0 {
        return Err(SimError::NoAllocation);
    }
    Ok(profile.interp_t_iter(
        alloc.occupied_nodes(),
        gpus,
        batch.per_gpu_batch,
        batch.accum_steps,
    ))
}

impl ModelProfile {
    /// Interpolated iteration time for a placement shape.
    pub fn interp_t_iter(&self, nodes: u32, gpus: u32, per_gpu_batch: u32, accum: u32) -> f64 {
        let points: Vec<([f64; 4], f64)> = self
            .throughput
            .iter()
            .map(|e| {
                (
                    [
                        f64::from(e.nodes),
                        f64::from(e.gpus),
                        f64::from(e.per_gpu_batch),
                        f64::from(e.accum_steps),
                    ],
                    e.t_iter_seconds,
                )
            })
            .collect();
        let refs: Vec<(&[f64], f64)> = points.iter().map(|(k, v)| (&k[..], *v)).collect();
        nested_interp(
            &refs,
            &[
                f64::from(nodes),
                f64::from(gpus),
                f64::from(per_gpu_batch),
                f64::from(accum),
            ],
        )
    }

    /// Interpolated gradient noise scale at a training progress point and
    /// total batch size.
    pub fn interp_phi(&self, epoch: f64, total_batch: u64) -> f64 {
        let points: Vec<([f64; 2], f64)> = self
            .pgns
            .iter()
            .map(|e| ([e.epoch, e.total_batch as f64], e.phi))
            .collect();
        let refs: Vec<(&[f64], f64)> = points.iter().map(|(k, v)| (&k[..], *v)).collect();
        nested_interp(&refs, &[epoch, total_batch as f64]).max(0.0)
    }

    /// Nominal single-GPU duration of a full run, in GPU-hours. Used to
    /// bucket models by size.
    pub fn single_gpu_hours(&self) -> f64 {
        // Realize the initial batch on one GPU (accumulating if it does not
        // fit memory).
        let mut m = self.m0;
        let mut s = 0u64;
        while m > u64::from(self.max_per_gpu_batch) && s < 15 {
            s += 1;
            m = self.m0.div_ceil(s + 1);
        }
        let t = self.interp_t_iter(1, 1, m as u32, s as u32);
        let iters_per_epoch = self.dataset_size as f64 / (m * (s + 1)) as f64;
        self.target_epochs * iters_per_epoch * t / 3600.0
    }
}

/// Piecewise-linear interpolation, one keyed dimension at a time. Each step
/// brackets the query between the two nearest key values present in the
/// current slice; queries beyond the range clamp to the nearest face.
fn nested_interp(points: &[(&[f64], f64)], query: &[f64]) -> f64 {
    assert!(!points.is_empty(), "interpolation table must be non-empty");
    if query.is_empty() {
        return points[0].1;
    }
    let mut keys: Vec<f64> = points.iter().map(|(k, _)| k[0]).collect();
    keys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    keys.dedup();

    let q = query[0];
    let clamped = q.clamp(keys[0], *keys.last().unwrap());
    if clamped != q {
        log::debug!("interpolation query {q} clamped to {clamped}");
    }

    let slice_at = |key: f64| -> Vec<(&[f64], f64)> {
        points
            .iter()
            .filter(|(k, _)| k[0] == key)
            .map(|(k, v)| (&k[1..], *v))
            .collect()
    };

    if let Some(&exact) = keys.iter().find(|&&k| k == clamped) {
        return nested_interp(&slice_at(exact), &query[1..]);
    }
    let hi_idx = keys.iter().position(|&k| k > clamped).unwrap();
    let (lo, hi) = (keys[hi_idx - 1], keys[hi_idx]);
    let lo_v = nested_interp(&slice_at(lo), &query[1..]);
    let hi_v = nested_interp(&slice_at(hi), &query[1..]);
    let w = (clamped - lo) / (hi - lo);
    lo_v + w * (hi_v - lo_v)
}

/// Ground truth used to synthesize the bundled profile library.
struct ModelSpec {
    name: &'static str,
    params: ThroughputParams<f64>,
    m0: u64,
    dataset_size: u64,
    max_batch: u64,
    max_per_gpu_batch: u32,
    target_epochs: f64,
    phi_start: f64,
    phi_end: f64,
}

/// The bundled synthetic profile library: six models spanning the small to
/// extra-large GPU-time buckets, tabulated from a ground-truth iteration-time
/// model over every node count with up to four GPUs per node, and noise
/// scales that grow over training.
pub fn builtin_library() -> ProfileLibrary {
    let specs = builtin_specs();
    let mut models = BTreeMap::new();
    for spec in &specs {
        models.insert(spec.name.to_string(), synthesize_profile(spec));
    }
    ProfileLibrary { models }
}

fn builtin_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec {
            name: "cifar10",
            params: params(0.004, 0.00028, (0.045, 0.004), (0.11, 0.012), 2.0),
            m0: 128,
            dataset_size: 50_000,
            max_batch: 4096,
            max_per_gpu_batch: 256,
            target_epochs: 60.0,
            phi_start: 256.0,
            phi_end: 3072.0,
        },
        ModelSpec {
            name: "neumf",
            params: params(0.003, 0.00004, (0.02, 0.0015), (0.06, 0.006), 2.0),
            m0: 256,
            dataset_size: 990_000,
            max_batch: 4096,
            max_per_gpu_batch: 512,
            target_epochs: 20.0,
            phi_start: 512.0,
            phi_end: 4096.0,
        },
        ModelSpec {
            name: "deepspeech2",
            params: params(0.05, 0.004, (0.035, 0.005), (0.22, 0.025), 2.2),
            m0: 20,
            dataset_size: 20_000,
            max_batch: 640,
            max_per_gpu_batch: 40,
            target_epochs: 60.0,
            phi_start: 60.0,
            phi_end: 600.0,
        },
        ModelSpec {
            name: "bert",
            params: params(0.08, 0.009, (0.025, 0.003), (0.14, 0.016), 2.5),
            m0: 12,
            dataset_size: 88_000,
            max_batch: 384,
            max_per_gpu_batch: 24,
            target_epochs: 8.0,
            phi_start: 36.0,
            phi_end: 360.0,
        },
        ModelSpec {
            name: "yolov3",
            params: params(0.05, 0.012, (0.02, 0.004), (0.10, 0.012), 2.5),
            m0: 8,
            dataset_size: 16_500,
            max_batch: 256,
            max_per_gpu_batch: 16,
            target_epochs: 140.0,
            phi_start: 24.0,
            phi_end: 240.0,
        },
        ModelSpec {
            name: "imagenet",
            params: params(0.05, 0.0028, (0.02, 0.003), (0.08, 0.010), 3.0),
            m0: 200,
            dataset_size: 1_281_167,
            max_batch: 6400,
            max_per_gpu_batch: 400,
            target_epochs: 120.0,
            phi_start: 600.0,
            phi_end: 6000.0,
        },
    ]
}

fn params(
    alpha_grad: f64,
    beta_grad: f64,
    local: (f64, f64),
    node: (f64, f64),
    gamma: f64,
) -> ThroughputParams<f64> {
    ThroughputParams {
        alpha_grad,
        beta_grad,
        alpha_sync_local: local.0,
        beta_sync_local: local.1,
        alpha_sync_node: node.0,
        beta_sync_node: node.1,
        gamma,
    }
}

fn synthesize_profile(spec: &ModelSpec) -> ModelProfile {
    let mut throughput = Vec::new();
    for nodes in 1..=16u32 {
        for mult in 1..=4u32 {
            let gpus = nodes * mult;
            if gpus > 64 {
                continue;
            }
            for m in batch_grid(spec, gpus) {
                // Iteration time is linear in the accumulation count, so two
                // anchors per (placement, batch) make the s-axis exact.
                for s in [0u32, 15] {
                    let batch = BatchConfig::new(m, s);
                    let t = crate::goodput::t_iter_shape(&spec.params, nodes, gpus, &batch);
                    throughput.push(ThroughputEntry {
                        nodes,
                        gpus,
                        per_gpu_batch: m,
                        accum_steps: s,
                        t_iter_seconds: t,
                    });
                }
            }
        }
    }

    let mut pgns = Vec::new();
    for i in 0..=4 {
        let frac = f64::from(i) / 4.0;
        let epoch = spec.target_epochs * frac;
        let phi = spec.phi_start * (spec.phi_end / spec.phi_start).powf(frac);
        for total_batch in [spec.m0, spec.max_batch] {
            pgns.push(PgnsEntry {
                epoch,
                total_batch,
                phi,
            });
        }
    }

    ModelProfile {
        throughput,
        pgns,
        dataset_size: spec.dataset_size,
        m0: spec.m0,
        max_batch: spec.max_batch,
        max_per_gpu_batch: spec.max_per_gpu_batch,
        target_epochs: spec.target_epochs,
    }
}

/// Per-GPU batch sizes to tabulate for a given GPU count: a short geometric
/// ladder from the smallest useful batch up to the memory cap.
fn batch_grid(spec: &ModelSpec, gpus: u32) -> Vec<u32> {
    let max_m = spec.max_per_gpu_batch;
    let min_m = ((spec.m0 / u64::from(gpus * 16)).max(1) as u32).min(max_m);
    let mut grid = vec![min_m];
    let steps = 4;
    for i in 1..=steps {
        let v = (f64::from(min_m)
            * (f64::from(max_m) / f64::from(min_m)).powf(f64::from(i) / f64::from(steps)))
        .round() as u32;
        if v > *grid.last().unwrap() {
            grid.push(v.min(max_m));
        }
    }
    if *grid.last().unwrap() != max_m {
        grid.push(max_m);
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_table_points_are_returned_verbatim() {
        let lib = builtin_library();
        let profile = lib.get("cifar10").unwrap();
        for e in profile.throughput.iter().step_by(17) {
            let v = profile.interp_t_iter(e.nodes, e.gpus, e.per_gpu_batch, e.accum_steps);
            assert_relative_eq!(v, e.t_iter_seconds, max_relative = 1e-12);
        }
    }

    #[test]
    fn midpoint_between_batch_sizes_is_the_mean() {
        let lib = ProfileLibrary {
            models: BTreeMap::from([(
                "toy".to_string(),
                ModelProfile {
                    throughput: vec![
                        ThroughputEntry {
                            nodes: 1,
                            gpus: 1,
                            per_gpu_batch: 10,
                            accum_steps: 0,
                            t_iter_seconds: 1.0,
                        },
                        ThroughputEntry {
                            nodes: 1,
                            gpus: 1,
                            per_gpu_batch: 20,
                            accum_steps: 0,
                            t_iter_seconds: 3.0,
                        },
                    ],
                    pgns: vec![PgnsEntry {
                        epoch: 0.0,
                        total_batch: 10,
                        phi: 5.0,
                    }],
                    dataset_size: 1000,
                    m0: 10,
                    max_batch: 40,
                    max_per_gpu_batch: 20,
                    target_epochs: 1.0,
                },
            )]),
        };
        let profile = lib.get("toy").unwrap();
        assert_relative_eq!(profile.interp_t_iter(1, 1, 15, 0), 2.0);
        // Clamped queries take the nearest-face value.
        assert_relative_eq!(profile.interp_t_iter(1, 1, 100, 0), 3.0);
        assert_relative_eq!(profile.interp_t_iter(1, 1, 1, 0), 1.0);
        assert_relative_eq!(profile.interp_t_iter(9, 9, 15, 7), 2.0);
    }

    #[test]
    fn accumulation_axis_is_exact_between_anchors() {
        // The generator tabulates s = 0 and s = 15; iteration time is linear
        // in s, so interpolation at s in between must be exact.
        let lib = builtin_library();
        let profile = lib.get("yolov3").unwrap();
        let truth = builtin_specs()
            .into_iter()
            .find(|s| s.name == "yolov3")
            .unwrap();
        for s in [1u32, 4, 9, 14] {
            let batch = BatchConfig::new(8, s);
            let interp = profile.interp_t_iter(2, 6, 8, s);
            let exact = crate::goodput::t_iter_shape(&truth.params, 2, 6, &batch);
            assert_relative_eq!(interp, exact, max_relative = 1e-9);
        }
    }

    #[test]
    fn phi_grows_over_training() {
        let lib = builtin_library();
        let profile = lib.get("imagenet").unwrap();
        let early = profile.interp_phi(0.0, 200);
        let late = profile.interp_phi(profile.target_epochs, 200);
        assert_relative_eq!(late / early, 10.0, max_relative = 1e-6);
        // Interpolation between measured epochs is monotone here.
        let mid = profile.interp_phi(profile.target_epochs / 2.0, 200);
        assert!(early < mid && mid < late);
    }

    #[test]
    fn unknown_model_errors() {
        let lib = builtin_library();
        let alloc = AllocationVector::from_shape(1, 1);
        let batch = BatchConfig::new(8, 0);
        assert!(matches!(
            interpolate_throughput(&lib, "nope", &alloc, &batch),
            Err(SimError::UnknownModel(_))
        ));
    }

    #[test]
    fn library_round_trips_through_json() {
        let lib = builtin_library();
        let text = lib.to_json();
        let back = ProfileLibrary::from_json(&text).unwrap();
        assert_eq!(lib, back);
    }

    #[test]
    fn bucket_sizes_match_the_intended_mix() {
        let lib = builtin_library();
        let hours: BTreeMap<&str, f64> = lib
            .models
            .iter()
            .map(|(k, v)| (k.as_str(), v.single_gpu_hours()))
            .collect();
        assert!(hours["cifar10"] < 1.0);
        assert!(hours["neumf"] < 1.0);
        assert!(hours["deepspeech2"] >= 1.0 && hours["deepspeech2"] < 10.0);
        assert!(hours["bert"] >= 1.0 && hours["bert"] < 10.0);
        assert!(hours["yolov3"] >= 10.0 && hours["yolov3"] < 100.0);
        assert!(
            hours["imagenet"] >= 100.0 && hours["imagenet"] < 1000.0,
            "imagenet: {}",
            hours["imagenet"]
        );
    }
}
