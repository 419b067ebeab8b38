//! Config loading and `--set key=value` overrides.

use std::fmt;
use std::path::Path;

use anyhow::Context;
use medcl_core::trainer::TrainConfig;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Bad flags or config contents; the process exits with code 1.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Reads `path` (or the defaults) and applies `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| UsageError::new(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut value = serde_json::to_value(&base)?;
    for o in overrides {
        apply(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| UsageError::new(format!("invalid override: {e}")).into())
}

/// Sets one dotted key. The key must already exist in the config; the value
/// is parsed as JSON when possible and taken as a string otherwise.
pub fn apply(root: &mut Value, assignment: &str) -> Result<(), UsageError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| UsageError::new(format!("override `{assignment}` is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(UsageError::new(format!("override `{assignment}` has an empty key")));
    }
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|obj| obj.get_mut(part))
            .ok_or_else(|| UsageError::new(format!("unknown config key `{key}`")))?;
    }
    if node.is_object() {
        return Err(UsageError::new(format!("`{key}` is a section, not a value")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Short hash naming a run directory: the config plus whatever else
/// distinguishes the command (rows, seeds, split).
pub fn run_hash(cfg: &TrainConfig, extra: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg.hash().as_bytes());
    h.update(extra.as_bytes());
    hex::encode(h.finalize())[..10].to_string()
}
