//! Strict JSON run configuration layered over the per-environment presets.

use std::path::Path;

use ctrlsplit_core::envs::EnvKind;
use ctrlsplit_core::trainer::TrainConfig;
use serde_json::{Map, Value};

/// Any problem with the configuration; maps to exit code 2.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

pub fn parse_env(name: &str) -> Result<EnvKind, ConfigError> {
    match name {
        "quadmaze" => Ok(EnvKind::QuadMaze),
        "catcher" => Ok(EnvKind::Catcher),
        "randmaze" => Ok(EnvKind::RandomMaze),
        other => Err(err(format!("unknown env '{}' (expected quadmaze, catcher or randmaze)", other))),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=<json>`; a value that is not valid JSON is taken as a string.
fn parse_set(entry: &str) -> Result<Value, ConfigError> {
    let (path, raw) = entry.split_once('=').ok_or_else(|| err(format!("--set '{}' is not KEY=VALUE", entry)))?;
    if path.is_empty() {
        return Err(err(format!("--set '{}' has an empty key", entry)));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), value);
        value = Value::Object(m);
    }
    Ok(value)
}

/// Resolved configuration plus a record of every explicit override.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: TrainConfig,
    pub overrides: Vec<String>,
}

/// Preset for the environment, then the file's keys, then `--set` entries,
/// then the seed flag. Unknown keys anywhere are rejected by name.
pub fn resolve(
    file_text: Option<&str>,
    env_flag: Option<EnvKind>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<Resolved, ConfigError> {
    let file: Value = match file_text {
        Some(t) => serde_json::from_str(t).map_err(|e| err(format!("invalid JSON: {}", e)))?,
        None => Value::Object(Map::new()),
    };
    if !file.is_object() {
        return Err(err("config file must hold a JSON object"));
    }
    let file_env = match file.get("env") {
        Some(Value::String(s)) => Some(parse_env(s)?),
        Some(other) => return Err(err(format!("env must be a string, got {}", other))),
        None => None,
    };
    let env = match (file_env, env_flag) {
        (Some(a), Some(b)) if a != b => {
            return Err(err(format!("--env {} conflicts with config env {}", b.name(), a.name())))
        }
        (Some(e), _) | (None, Some(e)) => e,
        (None, None) => return Err(err("missing env kind (give --env or an \"env\" key)")),
    };

    let mut merged = serde_json::to_value(TrainConfig::preset(env)).map_err(|e| err(e.to_string()))?;
    let mut overrides = Vec::new();
    if let Value::Object(m) = &file {
        overrides.extend(m.keys().filter(|k| *k != "env").map(|k| format!("file:{}", k)));
    }
    merge(&mut merged, file);
    for s in sets {
        merge(&mut merged, parse_set(s)?);
        overrides.push(format!("set:{}", s));
    }
    if let Some(seed) = seed {
        merge(&mut merged, serde_json::json!({ "seed": seed }));
    }
    let config: TrainConfig = serde_json::from_value(merged).map_err(|e| err(e.to_string()))?;
    config.validate().map_err(|e| err(e.to_string()))?;
    Ok(Resolved { config, overrides })
}

/// [`resolve`] reading the optional config file from disk.
pub fn resolve_file(
    path: Option<&Path>,
    env_flag: Option<EnvKind>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<Resolved, ConfigError> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| err(format!("reading {}: {}", p.display(), e)))?),
        None => None,
    };
    resolve(text.as_deref(), env_flag, sets, seed)
}
