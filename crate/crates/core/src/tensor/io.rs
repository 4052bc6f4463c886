//! Named-tensor serialization: a directory holding `manifest.json` (an
//! array of `{name, shape, offset}` records) and `weights.bin`
//! (concatenated little-endian 64-bit floats in manifest order).
//!
//! Offsets count f64 elements from the start of `weights.bin`. The format
//! is used for model checkpoints and sample regression fixtures.

use super::Tensor;
use crate::error::CoreError;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `manifest.json` and `weights.bin` into `dir` (created if
/// missing).
pub fn save_named_tensors(dir: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for nt in tensors {
        entries.push(ManifestEntry {
            name: nt.name.clone(),
            shape: nt.tensor.shape().to_vec(),
            offset,
        });
        for v in nt.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += nt.tensor.len();
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries)
        .map_err(|e| CoreError::Manifest {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let mut mf = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    mf.write_all(json.as_bytes())
        .map_err(|e| io_err(&manifest_path, e))?;
    let weights_path = dir.join("weights.bin");
    fs::write(&weights_path, &blob).map_err(|e| io_err(&weights_path, e))?;
    Ok(())
}

/// Reads a directory written by [`save_named_tensors`].
pub fn load_named_tensors(dir: &Path) -> Result<Vec<NamedTensor>> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&json).map_err(|e| CoreError::Manifest {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let weights_path = dir.join("weights.bin");
    let blob = fs::read(&weights_path).map_err(|e| io_err(&weights_path, e))?;
    if blob.len() % 8 != 0 {
        return Err(CoreError::Manifest {
            path: weights_path.display().to_string(),
            reason: format!("blob length {} not a multiple of 8", blob.len()),
        });
    }
    let n_total = blob.len() / 8;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let len: usize = e.shape.iter().product();
        if e.offset + len > n_total {
            return Err(CoreError::Manifest {
                path: manifest_path.display().to_string(),
                reason: format!(
                    "entry {} spans [{}, {}) beyond blob of {} elements",
                    e.name,
                    e.offset,
                    e.offset + len,
                    n_total
                ),
            });
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let start = (e.offset + i) * 8;
            let bytes: [u8; 8] = blob[start..start + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        out.push(NamedTensor {
            name: e.name,
            tensor: Tensor::new(e.shape, data)?,
        });
    }
    Ok(out)
}
