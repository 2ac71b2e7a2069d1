//! Grouped checkpoint archive. Layout:
//!
//! ```text
//! SLTF1\n
//! u64 LE: length of the JSON index
//! JSON index: run metadata + per-group parameter names and shapes
//! concatenated f64 LE blobs, groups in index order, params in listed order
//! ```
//!
//! Loading replaces exactly the requested groups after verifying every
//! shape signature; a requested group absent from the file is an error,
//! never a silent skip.

use crate::tensor::{ParamGroup, ParamStore};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 6] = b"SLTF1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint is missing requested group {0:?}")]
    MissingGroup(String),
    #[error("shape mismatch in group {0:?}")]
    ShapeMismatch(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub preset: String,
    pub seed: u64,
    pub epoch: usize,
    pub dev_bleu4: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    meta: CheckpointMeta,
    /// Group name -> parameters, serialized in this order.
    groups: BTreeMap<String, Vec<ParamEntry>>,
}

/// Write every parameter group in the store (trainable weights and
/// running statistics alike).
pub fn save_checkpoint(
    store: &ParamStore,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut groups: BTreeMap<String, Vec<ParamEntry>> = BTreeMap::new();
    for (_, p) in store.iter() {
        groups
            .entry(p.group.as_str().to_string())
            .or_default()
            .push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            });
    }
    let index = Index {
        meta: meta.clone(),
        groups,
    };
    let json = serde_json::to_vec(&index)
        .map_err(|e| CheckpointError::Format(format!("index serialization failed: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for entries in index.groups.values() {
        for e in entries {
            let id = store
                .lookup(&e.name)
                .expect("index was built from this store");
            for &v in store.value(id).iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_index(bytes: &[u8], path: &Path) -> Result<(Index, usize), CheckpointError> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Format(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let len_start = MAGIC.len();
    let json_len =
        u64::from_le_bytes(bytes[len_start..len_start + 8].try_into().unwrap()) as usize;
    let json_start = len_start + 8;
    if bytes.len() < json_start + json_len {
        return Err(CheckpointError::Format("truncated index".into()));
    }
    let index: Index = serde_json::from_slice(&bytes[json_start..json_start + json_len])
        .map_err(|e| CheckpointError::Format(format!("bad index json: {e}")))?;
    Ok((index, json_start + json_len))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    /// Groups copied into the store.
    pub loaded: Vec<String>,
    /// Groups present in the file but not requested.
    pub skipped: Vec<String>,
}

/// Replace the requested groups from a checkpoint file. Every requested
/// group must exist in the file, and every parameter in it must exist in
/// the store with an identical shape.
pub fn load_checkpoint(
    store: &mut ParamStore,
    path: &Path,
    groups: &[ParamGroup],
) -> Result<LoadReport, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (index, data_start) = read_index(&bytes, path)?;

    let requested: Vec<&str> = groups.iter().map(ParamGroup::as_str).collect();
    for name in &requested {
        if !index.groups.contains_key(*name) {
            return Err(CheckpointError::MissingGroup((*name).to_string()));
        }
    }

    // Walk blobs in index order, copying only the requested groups.
    let mut offset = data_start;
    let mut loaded = Vec::new();
    let mut skipped = Vec::new();
    for (gname, entries) in &index.groups {
        let wanted = requested.contains(&gname.as_str());
        for e in entries {
            let count: usize = e.shape.iter().product();
            let nbytes = count * 8;
            if !wanted {
                offset += nbytes;
                continue;
            }
            if bytes.len() < offset + nbytes {
                return Err(CheckpointError::Format("truncated parameter data".into()));
            }
            let id = store
                .lookup(&e.name)
                .ok_or_else(|| CheckpointError::ShapeMismatch(gname.clone()))?;
            if store.value(id).shape() != e.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch(gname.clone()));
            }
            let mut values = Vec::with_capacity(count);
            for i in 0..count {
                let start = offset + i * 8;
                values.push(f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .expect("length matches shape product");
            *store.value_mut(id) = arr;
            offset += nbytes;
        }
        if wanted {
            loaded.push(gname.clone());
        } else {
            skipped.push(gname.clone());
        }
    }
    Ok(LoadReport { loaded, skipped })
}

/// Metadata and group names without touching parameter data.
pub fn read_checkpoint_meta(
    path: &Path,
) -> Result<(CheckpointMeta, Vec<String>), CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (index, _) = read_index(&bytes, path)?;
    Ok((index.meta, index.groups.keys().cloned().collect()))
}
