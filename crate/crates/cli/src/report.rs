use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use cochstream_core::params::{sha256_file, sha256_hex};
use serde::Serialize;
use serde_json::Value;

use crate::config::SCHEMA_VERSION;

/// Machine-readable outcome of one command.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub schema_version: u32,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    /// Input path -> SHA-256 (directories hash their sorted file listing).
    pub inputs: BTreeMap<String, String>,
    pub result: Value,
}

impl Report {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, result: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: BTreeMap::new(),
            result: serde_json::to_value(result)?,
        })
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.insert(path.display().to_string(), hash_input(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing report {}", path.display()))
    }
}

/// SHA-256 of a file, or of `relative path \0 file hash \n` lines for every
/// file under a directory in sorted order.
pub fn hash_input(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_file(path)?);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut listing = String::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        listing.push_str(&format!("{rel}\0{}\n", sha256_file(&f)?));
    }
    Ok(sha256_hex(listing.as_bytes()))
}
