//! JSON configuration loading with `key=value` overrides.
//!
//! Missing keys take their defaults, unknown keys are rejected and the
//! parsed value is validated before it is returned.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::audit::AuditSpec;
use crate::bench::SweepSpec;
use crate::sim::ScenarioConfig;
use crate::{Error, Result};

/// Environment variable overriding the seed of any configuration.
pub const SEED_ENV: &str = "CVARNAV_SEED";

pub trait Configuration: DeserializeOwned {
    /// Top-level key replaced by [`SEED_ENV`].
    const SEED_KEY: &'static str;
    fn validate(&self) -> Result<()>;
}

impl Configuration for ScenarioConfig {
    const SEED_KEY: &'static str = "seed";
    fn validate(&self) -> Result<()> {
        ScenarioConfig::validate(self)
    }
}

impl Configuration for SweepSpec {
    const SEED_KEY: &'static str = "base_seed";
    fn validate(&self) -> Result<()> {
        SweepSpec::validate(self)
    }
}

impl Configuration for AuditSpec {
    const SEED_KEY: &'static str = "base_seed";
    fn validate(&self) -> Result<()> {
        AuditSpec::validate(self)
    }
}

/// Applies `a.b.c=value` to a JSON object. The value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "override `{key}`: `{}` is not an object",
                parts[..depth].join(".")
            )));
        };
        if depth + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

/// Parses configuration text, applies the seed environment override and
/// then `overrides` in order, and validates the result.
pub fn parse_str<T: Configuration>(text: &str, overrides: &[String]) -> Result<T> {
    let mut root: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
    if !root.is_object() {
        return Err(Error::Config("configuration must be a JSON object".into()));
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        apply_override(&mut root, &format!("{}={seed}", T::SEED_KEY))?;
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let parsed: T = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    parsed.validate()?;
    Ok(parsed)
}

pub fn load<T: Configuration>(path: &Path, overrides: &[String]) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_str(&text, overrides).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
