//! On-disk checkpoint container.
//!
//! A checkpoint is a directory holding `manifest.json` (format tag, kind,
//! architecture config and its hash, free-form metadata, and a table of
//! `{name, shape, offset, len}` entries) and `tensors.bin`, the concatenation of
//! every tensor as little-endian `f32`. Offsets are in bytes, lengths in elements.
//! The manifest carries the blob's SHA-256, checked on load.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const FORMAT: &str = "toonpaint-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

pub type HostTensors = IndexMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: HostTensors,
}

impl Checkpoint {
    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> HostTensors {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save(
    dir: impl AsRef<Path>,
    kind: &str,
    config: serde_json::Value,
    config_hash: &str,
    meta: serde_json::Value,
    tensors: &HostTensors,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(tensors.values().map(|(_, d)| d.len() * 4).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, (shape, data)) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!("tensor {name}: shape {shape:?} vs {} values", data.len())));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: blob.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        kind: kind.to_string(),
        config,
        config_hash: config_hash.to_string(),
        meta,
        blob_bytes: blob.len() as u64,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors: entries,
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}

/// Reads and validates a checkpoint; nothing is returned unless every entry checks out.
pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}, expected {FORMAT:?}", manifest.format)));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob length mismatch: manifest says {} bytes, {} has {}",
            manifest.blob_bytes,
            blob_path.display(),
            blob.len()
        )));
    }
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} fails its checksum: sha256 {digest}, manifest says {}",
            blob_path.display(),
            manifest.blob_sha256
        )));
    }
    let mut tensors = IndexMap::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let expected: u64 = e.shape.iter().map(|&d| d as u64).product();
        if expected != e.len {
            return Err(Error::Checkpoint(format!("tensor {}: shape {:?} but len {}", e.name, e.shape, e.len)));
        }
        let end = e.offset.checked_add(e.len * 4).filter(|&end| end <= blob.len() as u64).ok_or_else(|| {
            Error::Checkpoint(format!(
                "tensor {} spans bytes {}..{} beyond blob of {} bytes",
                e.name,
                e.offset,
                e.offset + e.len * 4,
                blob.len()
            ))
        })?;
        let data = blob[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.insert(e.name.clone(), (e.shape.clone(), data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(Checkpoint { manifest, tensors })
}
