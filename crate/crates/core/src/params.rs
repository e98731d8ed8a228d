//! Named parameter sets and the checkpoint format shared by both models.
//!
//! A checkpoint is a JSON manifest (`*.json`) next to a little-endian f32 blob
//! (`*.bin`). The manifest records tensor names, shapes and byte offsets, the
//! resolved model config, the training step and the blob's SHA-256.

use std::path::{Path, PathBuf};

use cochstream_numerics::{Array, Scalar, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Array<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// Registers every tensor as a trainable leaf.
    pub fn on_tape(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant (inference).
    pub fn on_tape_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Array::new(shape, data).expect("positive shape")
}

pub(crate) fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Array::new(shape, data).expect("positive shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    #[serde(default)]
    pub corpus_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_sha256: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "cochstream-checkpoint";

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub struct CheckpointData<'a> {
    pub kind: &'a str,
    pub config: serde_json::Value,
    pub step: u64,
    pub corpus_hash: Option<String>,
    pub tensors: Vec<(String, &'a Array<f32>)>,
    pub extra: serde_json::Value,
}

/// Writes manifest and blob; returns the blob's SHA-256 hex digest.
pub fn save_checkpoint(manifest_path: &Path, data: CheckpointData<'_>) -> Result<String> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(data.tensors.len());
    let mut offset = 0;
    for (name, t) in &data.tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sha = hex::encode(Sha256::digest(&blob));
    let bin = blob_path(manifest_path);
    std::fs::write(&bin, &blob).map_err(|e| CoreError::io(&bin, e))?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        kind: data.kind.into(),
        config: data.config,
        step: data.step,
        corpus_hash: data.corpus_hash,
        tensors: entries,
        blob: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_sha256: sha.clone(),
        extra: data.extra,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path, json).map_err(|e| CoreError::io(manifest_path, e))?;
    Ok(sha)
}

pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Array<f32>)>,
}

impl LoadedCheckpoint {
    pub fn take(&mut self, name: &str) -> Result<Array<f32>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CoreError::Invalid(format!("checkpoint has no tensor {name:?}")))?;
        Ok(self.tensors.swap_remove(i).1)
    }
}

pub fn load_checkpoint(manifest_path: &Path, expected_kind: &str) -> Result<LoadedCheckpoint> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| CoreError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.kind != expected_kind {
        return Err(CoreError::format(
            manifest_path,
            format!("expected a {expected_kind} checkpoint, found {}/{}", manifest.format, manifest.kind),
        ));
    }
    let bin = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = std::fs::read(&bin).map_err(|e| CoreError::io(&bin, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(CoreError::format(&bin, "blob checksum mismatch"));
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| CoreError::format(&bin, format!("tensor {} runs past the blob", e.name)))?;
        tensors.push((e.name.clone(), Array::new(&e.shape, data.to_vec())?));
    }
    Ok(LoadedCheckpoint { manifest, tensors })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
