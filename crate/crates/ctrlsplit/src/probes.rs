//! Latent dumps for an environment selection and the named probe metrics.

use anyhow::{bail, ensure, Result};
use ctrlsplit_core::envs::{quad_maze, randmaze_generate, EnvKind, MazeSpec, QUAD_MAZE_COUNT};
use ctrlsplit_core::evalviz::{
    cluster_purity, column_std, dump_catcher, dump_mazes, dump_transition_consistency, leakage_probe,
    linear_probe_r2, LatentDump, LeakageConfig, ProbeReport,
};
use ctrlsplit_core::nets::Model;
use ctrlsplit_core::ParamSet;

/// Which enumerated states to encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    /// Random mazes only: how many layouts, and the seed of the first.
    pub mazes: usize,
    pub maze_seed: u64,
}

impl Default for Selection {
    fn default() -> Self {
        Self { mazes: 20, maze_seed: 0 }
    }
}

pub fn maze_set(env: EnvKind, sel: Selection) -> Result<Vec<(u64, MazeSpec)>> {
    Ok(match env {
        EnvKind::QuadMaze => (0..QUAD_MAZE_COUNT).map(|i| Ok((i as u64, quad_maze(i)?))).collect::<Result<_>>()?,
        EnvKind::RandomMaze => {
            ensure!(sel.mazes > 0, "--mazes must be positive");
            (0..sel.mazes as u64)
                .map(|i| {
                    let seed = sel.maze_seed.wrapping_add(i);
                    Ok((seed, randmaze_generate(seed)?))
                })
                .collect::<Result<_>>()?
        }
        EnvKind::Catcher => bail!("catcher has no mazes"),
    })
}

/// Every quad-maze state, `sel.mazes` random mazes, or every catcher state.
pub fn dump(params: &ParamSet<f32>, model: &Model, sel: Selection) -> Result<LatentDump> {
    let env = model.encoder.env;
    Ok(match env {
        EnvKind::Catcher => dump_catcher(params, model)?,
        _ => dump_mazes(params, model, &maze_set(env, sel)?)?,
    })
}

pub const METRICS: [&str; 5] = ["purity", "linear-r2", "consistency", "leakage", "zc-std"];

/// Threshold on the normalized transition error.
pub const CONSISTENCY_THRESHOLD: f64 = 0.5;

/// Position coordinates that z^c should encode: the agent cell, or the
/// paddle column.
fn controllable_targets(dump: &LatentDump) -> Vec<Vec<f64>> {
    let states = dump.states();
    match dump.env {
        EnvKind::Catcher => states.iter().map(|s| vec![s[0]]).collect(),
        _ => states,
    }
}

fn majority_share(labels: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

pub fn run(metric: &str, dump: &LatentDump, seed: u64, leakage: &LeakageConfig) -> Result<ProbeReport> {
    let report = |value: f64, baseline: f64, split: String| ProbeReport {
        metric: metric.to_string(),
        value,
        baseline,
        split,
        seed,
    };
    let n = dump.rows.len();
    Ok(match metric {
        "purity" => {
            let labels = dump.groups();
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            ensure!(distinct.len() >= 2, "purity needs at least two mazes");
            let k = distinct.len();
            // relabel to 0..k so purity's dense counting stays small
            let dense: Vec<usize> = labels.iter().map(|l| distinct.binary_search(l).expect("present")).collect();
            let value = cluster_purity(&dump.zu(), &dense, k, seed)?;
            report(value, majority_share(&dense), format!("all {} states; k={} z^u vs maze", n, k))
        }
        "linear-r2" => {
            let r2 = linear_probe_r2(&dump.zc(), &controllable_targets(dump), seed)?;
            let value = r2.iter().copied().fold(f64::INFINITY, f64::min);
            report(value, 0.0, format!("80/20 of {} states; min over {} coordinates", n, r2.len()))
        }
        "consistency" => {
            let value = dump_transition_consistency(dump, CONSISTENCY_THRESHOLD)?;
            let mut identity = dump.clone();
            for r in &mut identity.rows {
                r.predicted = vec![r.zc.clone(); r.next_zc.len()];
            }
            let baseline = dump_transition_consistency(&identity, CONSISTENCY_THRESHOLD)?;
            report(value, baseline, format!("all {} states x actions; threshold {}", n, CONSISTENCY_THRESHOLD))
        }
        "leakage" => {
            let l = leakage_probe(&dump.zc(), &dump.zu(), seed, leakage)?;
            report(l.ratio, 1.0, format!("80/20 of {} states; test mse {} vs mean {}", n, l.test_mse, l.baseline_mse))
        }
        "zc-std" => {
            let std = column_std(&dump.zc());
            let value = std.iter().copied().fold(f64::INFINITY, f64::min);
            report(value, 0.0, format!("all {} states; min over {} dimensions", n, std.len()))
        }
        other => bail!("unknown metric '{}' (expected one of {})", other, METRICS.join(", ")),
    })
}
