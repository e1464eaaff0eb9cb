//! Flat dotted-key configuration on top of the library's config structs.
//!
//! The canonical key set is whatever the nested serde structure flattens to
//! (`train.loss.tau`, `probe.runs`, ...). Files and `--set` overrides may
//! only touch known keys; the effective configuration is echoed back out as
//! `resolved_config.json` with sorted keys, so a run can be reproduced by
//! feeding that file back in unchanged.

use mlgcl::eval::ProbeConfig;
use mlgcl::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

/// Validation failure in args or config; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, inner) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, inner, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(map: &BTreeMap<String, Value>) -> Value {
    let mut root = serde_json::Map::new();
    for (key, v) in map {
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for part in &parts[..parts.len() - 1] {
            cur = cur
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(serde_json::Map::new()))
                .as_object_mut()
                .expect("intermediate keys are objects");
        }
        cur.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

pub fn to_flat(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let nested = serde_json::to_value(cfg).expect("config serializes");
    let mut out = BTreeMap::new();
    flatten_into("", &nested, &mut out);
    out
}

pub fn from_flat(map: &BTreeMap<String, Value>) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_value(unflatten(map))
        .map_err(|e| ConfigError(format!("invalid config value: {e}")))?;
    cfg.train
        .validate()
        .map_err(|e| ConfigError(e.to_string()))?;
    cfg.probe
        .validate()
        .map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn set_known(map: &mut BTreeMap<String, Value>, key: &str, value: Value) -> Result<(), ConfigError> {
    if !map.contains_key(key) {
        return Err(ConfigError(format!("unknown config key `{key}`")));
    }
    map.insert(key.to_string(), value);
    Ok(())
}

pub fn apply_file(map: &mut BTreeMap<String, Value>, path: &Path) -> Result<(), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let parsed: serde_json::Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("config {} is not a JSON object: {e}", path.display())))?;
    for (key, value) in parsed {
        set_known(map, &key, value)?;
    }
    Ok(())
}

/// Applies one `KEY=VALUE` override. The value is parsed as JSON when
/// possible so numbers and booleans come through typed; anything else is
/// taken as a bare string, which is how enum variants are spelled.
pub fn apply_set(map: &mut BTreeMap<String, Value>, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got `{spec}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_known(map, key, value)
}

pub fn resolved_json(map: &BTreeMap<String, Value>) -> String {
    let mut s = serde_json::to_string_pretty(map).expect("flat map serializes");
    s.push('\n');
    s
}

/// Resolves the effective configuration: defaults, then the config file,
/// then `--set` overrides in order, then the `--seed` shorthand (which sets
/// both `train.seed` and `probe.seed`). Returns the typed config together
/// with the flat map used for the `resolved_config.json` echo.
pub fn resolve(
    config_file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(RunConfig, BTreeMap<String, Value>), ConfigError> {
    let mut map = to_flat(&RunConfig::default());
    if let Some(path) = config_file {
        apply_file(&mut map, path)?;
    }
    for spec in sets {
        apply_set(&mut map, spec)?;
    }
    if let Some(s) = seed {
        set_known(&mut map, "train.seed", Value::from(s))?;
        set_known(&mut map, "probe.seed", Value::from(s))?;
    }
    let cfg = from_flat(&map)?;
    Ok((cfg, map))
}
