//! Run-state checkpoints: `params.ducf`, `optim.ducf` and `state.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use ctrlsplit_core::nets::{HeadKind, Model};
use ctrlsplit_core::trainer::{Phase, RunState, StreamStates, Streams, TrainConfig};
use ctrlsplit_core::ParamSet;
use serde::{Deserialize, Serialize};

use crate::formats::{load_params, save_params};

pub const PARAMS_FILE: &str = "params.ducf";
pub const OPTIM_FILE: &str = "optim.ducf";
pub const STATE_FILE: &str = "state.json";

/// Everything of a [`RunState`] that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub phase: Phase,
    pub iteration: u64,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub streams: StreamStates,
}

/// Writes to a sibling temp file and renames, so a crash never leaves a
/// half-written checkpoint behind.
fn atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn save_state(dir: &Path, state: &RunState) -> Result<()> {
    atomic(&dir.join(PARAMS_FILE), |p| save_params(p, &state.params))?;
    atomic(&dir.join(OPTIM_FILE), |p| save_params(p, &state.optimizer_tensors()))?;
    let file = StateFile {
        phase: state.phase,
        iteration: state.iteration,
        optimizer_steps: state.optimizer_steps(),
        streams: state.streams.states(),
    };
    atomic(&dir.join(STATE_FILE), |p| Ok(fs::write(p, serde_json::to_string_pretty(&file)? + "\n")?))
}

/// Parameters only, for phases that are not resumable.
pub fn save_params_only(dir: &Path, params: &ParamSet<f32>) -> Result<()> {
    atomic(&dir.join(PARAMS_FILE), |p| save_params(p, params))
}

/// Overwrites `fresh` (built for the same configuration) with the saved state.
pub fn restore_state(dir: &Path, fresh: &mut RunState) -> Result<()> {
    let text = fs::read_to_string(dir.join(STATE_FILE)).with_context(|| format!("no {} in {}", STATE_FILE, dir.display()))?;
    let file: StateFile = serde_json::from_str(&text)?;
    ensure!(file.phase == fresh.phase, "checkpoint is from phase {:?}, expected {:?}", file.phase, fresh.phase);
    fresh.params = load_params(&dir.join(PARAMS_FILE))?;
    fresh.restore_optimizers(&load_params(&dir.join(OPTIM_FILE))?, &file.optimizer_steps)?;
    fresh.iteration = file.iteration;
    fresh.streams = Streams::from_states(&file.streams);
    Ok(())
}

/// Resolves `--checkpoint` given as a run directory or a params file.
pub fn params_path(checkpoint: &Path) -> PathBuf {
    if checkpoint.is_dir() {
        checkpoint.join(PARAMS_FILE)
    } else {
        checkpoint.to_path_buf()
    }
}

/// Model carrying every head whose weights are present in `params`.
pub fn model_for(cfg: &TrainConfig, params: &ParamSet<f32>) -> Result<Model> {
    ensure!(params.contains("enc.conv1.w"), "checkpoint has no encoder");
    let heads: Vec<HeadKind> =
        HeadKind::ALL.into_iter().filter(|k| params.contains(&format!("{}.l0.w", k.network()))).collect();
    let model = Model::new(cfg.encoder()?, &heads);
    for spec in model.heads.values() {
        let w = params.get(&format!("{}.l0.w", spec.kind.network()))?;
        ensure!(
            w.shape().get(1) == Some(&spec.input),
            "{} head does not fit the configured encoder (weights {:?}, input {})",
            spec.kind.network(),
            w.shape(),
            spec.input
        );
    }
    Ok(model)
}
