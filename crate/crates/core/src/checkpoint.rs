//! Checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, a JSON manifest of that
//! many bytes, then every tensor as row-major little-endian `f32` in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::init_params;
use crate::scaler::Scalers;
use crate::tensor::Array;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    scalers: Scalers,
    best_epoch: Option<usize>,
    best_val_rmse: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub scalers: Scalers,
    /// Epoch (1-based) whose parameters these are; `None` when untrained.
    pub best_epoch: Option<usize>,
    pub best_val_rmse: Option<f64>,
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut blob = Vec::with_capacity(ckpt.params.num_scalars() * 4);
    for (name, a) in ckpt.params.iter() {
        let offset = blob.len();
        for &v in a.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ckpt.config.clone(),
        scalers: ckpt.scalers,
        best_epoch: ckpt.best_epoch,
        best_val_rmse: ckpt.best_val_rmse,
        tensors,
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut bytes = Vec::with_capacity(8 + header.len() + blob.len());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&blob);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(manifest_err(
            path,
            "file shorter than the header length field",
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            manifest_err(
                path,
                format!("header length {header_len} exceeds file size"),
            )
        })?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| manifest_err(path, e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| manifest_err(path, "missing format_version"))?;
    if version != CHECKPOINT_FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| manifest_err(path, e.to_string()))?;
    manifest.config.validate()?;
    let blob = &bytes[header_end..];

    let expected = init_params(&manifest.config)?;
    if expected.len() != manifest.tensors.len() {
        return Err(manifest_err(
            path,
            format!(
                "{} tensors listed, config implies {}",
                manifest.tensors.len(),
                expected.len()
            ),
        ));
    }
    let mut params = ParamStore::new();
    for (entry, (want_name, want)) in manifest.tensors.iter().zip(expected.iter()) {
        if entry.name != want_name || entry.shape != want.shape() {
            return Err(manifest_err(
                path,
                format!(
                    "tensor `{}` {:?} where config implies `{want_name}` {:?}",
                    entry.name,
                    entry.shape,
                    want.shape()
                ),
            ));
        }
        let count: usize = entry.shape.iter().product();
        if entry.len != count * 4 {
            return Err(manifest_err(
                path,
                format!(
                    "tensor `{}` spans {} bytes, shape needs {}",
                    entry.name,
                    entry.len,
                    count * 4
                ),
            ));
        }
        let end = entry.offset + entry.len;
        if end > blob.len() {
            return Err(Error::Truncated {
                tensor: entry.name.clone(),
                start: entry.offset,
                end,
                available: blob.len(),
            });
        }
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.insert(entry.name.clone(), Array::new(entry.shape.clone(), data)?)?;
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        scalers: manifest.scalers,
        best_epoch: manifest.best_epoch,
        best_val_rmse: manifest.best_val_rmse,
    })
}
