//! Per-run manifest, written once before any training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use ctrlsplit_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector; re-running it reproduces the run.
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Config keys that differ from the environment preset, in application order.
    pub overrides: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: &TrainConfig, overrides: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            seed: config.seed,
            config: config.clone(),
            overrides: overrides.to_vec(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn artifacts(mut self, names: &[&str]) -> Self {
        self.artifacts = names.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Writes the manifest unless one exists. An existing manifest (a resumed
    /// run) must describe the same configuration up to the iteration budgets,
    /// which a resume may extend.
    pub fn write_once(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let old = load_manifest(&path)?;
            anyhow::ensure!(
                budget_free(&old.config) == budget_free(&self.config) && old.command == self.command,
                "{} describes a different run; use a fresh --out directory",
                path.display()
            );
            return Ok(());
        }
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn budget_free(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { pretrain_iterations: 0, refine_iterations: 0, rl_iterations: 0, ..cfg.clone() }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
