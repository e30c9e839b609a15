//! One-axis ablation sweeps.
//!
//! A sweep copies the base configuration once per arm and moves exactly one
//! knob; the isolation check makes that a hard guarantee rather than a
//! convention. Seeds run in parallel worker threads, each preparing its
//! backbone once and reusing it across arms (and memoizing warm-up results
//! per mode), so the expensive phases are never repeated.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{prepare_backbone, run_gcl, warm_up, RunResult};
use crate::isa::{IsaArtifacts, IsaMode};
use crate::masking::MaskPolicy;
use crate::Result;

/// Which knob a sweep moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Mask,
    Isa,
    Buffer,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(SweepAxis::Mask),
            "isa" => Ok(SweepAxis::Isa),
            "buffer" => Ok(SweepAxis::Buffer),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis {other:?} (expected mask|isa|buffer)"
            ))),
        }
    }
}

/// Replay capacities tried by the buffer axis: none, a handful of batches,
/// and a large share of the stream.
pub const BUFFER_ARMS: [usize; 3] = [0, 64, 256];

/// The arms an axis expands to, as `(label, config)` pairs.
pub fn expand_arms(base: &ExperimentConfig, axis: SweepAxis) -> Vec<(String, ExperimentConfig)> {
    match axis {
        SweepAxis::Mask => MaskPolicy::ALL
            .iter()
            .map(|&policy| {
                let mut config = base.clone();
                config.mask_policy = policy;
                (format!("mask={}", policy.as_str()), config)
            })
            .collect(),
        SweepAxis::Isa => IsaMode::ALL
            .iter()
            .map(|&mode| {
                let mut config = base.clone();
                config.isa.mode = mode;
                (format!("isa={mode}"), config)
            })
            .collect(),
        SweepAxis::Buffer => BUFFER_ARMS
            .iter()
            .map(|&capacity| {
                let mut config = base.clone();
                config.buffer_capacity = capacity;
                (format!("buffer={capacity}"), config)
            })
            .collect(),
    }
}

fn allowed_keys(axis: SweepAxis) -> &'static [&'static str] {
    match axis {
        SweepAxis::Mask => &["mask.policy"],
        SweepAxis::Isa => &["isa.mode"],
        SweepAxis::Buffer => &["buffer.capacity"],
    }
}

/// Runs every arm of the axis across the given seeds. Results are ordered
/// arm-major (`arm 0 × seeds..., arm 1 × seeds...`).
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    seeds: &[u64],
) -> Result<Vec<RunResult>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
    }
    let arms = expand_arms(base, axis);
    // Isolation: every arm differs from the base in the swept key alone.
    for (label, config) in &arms {
        let moved = base.diff(config);
        let allowed = allowed_keys(axis);
        if moved.iter().any(|k| !allowed.contains(k)) {
            return Err(Error::InvalidConfig(format!(
                "arm {label} moved {moved:?}, expected a subset of {allowed:?}"
            )));
        }
    }

    let results = std::thread::scope(|scope| -> Result<Vec<Vec<RunResult>>> {
        let mut handles = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let arms = &arms;
            handles.push(scope.spawn(move || -> Result<Vec<RunResult>> {
                let mut seeded = arms[0].1.clone();
                seeded.seed = seed;
                let prepared = prepare_backbone(&seeded)?;
                let mut warmed: BTreeMap<String, IsaArtifacts> = BTreeMap::new();
                let mut per_seed = Vec::with_capacity(arms.len());
                for (label, config) in arms.iter() {
                    let mut config = config.clone();
                    config.seed = seed;
                    let artifacts = if config.isa.mode == IsaMode::Off {
                        None
                    } else {
                        let key = config.isa.mode.to_string();
                        if !warmed.contains_key(&key) {
                            let (artifacts, _) = warm_up(&config, &prepared)?;
                            warmed.insert(key.clone(), artifacts);
                        }
                        Some(warmed[&key].clone())
                    };
                    let mut result = run_gcl(&config, &prepared, artifacts)?;
                    result.label = label.clone();
                    per_seed.push(result);
                }
                Ok(per_seed)
            }));
        }
        let mut by_seed = Vec::with_capacity(handles.len());
        for handle in handles {
            by_seed.push(handle.join().expect("sweep worker panicked")?);
        }
        Ok(by_seed)
    })?;

    // arm-major ordering
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for arm_idx in 0..arms.len() {
        for seed_run in &results {
            out.push(seed_run[arm_idx].clone());
        }
    }
    Ok(out)
}
