use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

pub fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `defaults`, then keys from the JSON file, then non-null `overrides`.
/// Unknown keys and a mismatched `schema_version` are rejected.
pub fn resolve<C: Serialize + DeserializeOwned>(defaults: C, file: Option<&Path>, overrides: &impl Serialize) -> Result<C> {
    let mut v = serde_json::to_value(&defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let f: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !f.is_object() {
            bail!("config {} must be a JSON object", path.display());
        }
        merge(&mut v, f);
    }
    merge(&mut v, serde_json::to_value(overrides)?);
    match v.get("schema_version").and_then(Value::as_u64) {
        Some(s) if s == SCHEMA_VERSION as u64 => {}
        other => bail!("unsupported schema_version {other:?}; expected {SCHEMA_VERSION}"),
    }
    serde_json::from_value(v).context("invalid configuration")
}

/// Errors when a required path key was left empty.
pub fn require(path: &Path, key: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        bail!("missing required config key `{key}`");
    }
    Ok(())
}

pub fn opt_path(p: &Option<PathBuf>) -> Option<&Path> {
    p.as_deref()
}
