//! Weight container.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: manifest length M] [M bytes: UTF-8 JSON manifest] [blob section]
//! ```
//!
//! The manifest records the model config, the blob length and its CRC32, and
//! for every tensor its shape, dtype (`f32`), byte offset and byte length
//! within the blob section. Blobs are little-endian `f32` in parameter order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ConfigError, VitConfig};
use super::params::{VitParams, VitWeights};
use crate::fsutil::write_atomic;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_NAME: &str = "ctvit-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error("checksum mismatch: manifest says {expected:#010x}, blob hashes to {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("tensor `{0}` missing from weight file")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in weight file")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, config requires {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` has dtype `{dtype}`, only f32 is supported")]
    Dtype { name: String, dtype: String },
    #[error("invalid model config in weight file: {0}")]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: VitConfig,
    pub blob_length: u64,
    pub blob_crc32: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn encode_weights<T: Scalar>(config: &VitConfig, params: &VitParams<T>) -> Result<Vec<u8>, WeightsError> {
    config.validate()?;
    let expected = VitWeights::shapes(config);
    let mut blob = Vec::with_capacity(params.num_parameters() * 4);
    let mut tensors = BTreeMap::new();
    for ((name, t), (_, shape)) in params.named().into_iter().zip(expected.named()) {
        if t.shape() != shape.as_slice() {
            return Err(WeightsError::ShapeMismatch {
                name,
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        tensors.insert(
            name,
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length: blob.len() as u64 - offset,
            },
        );
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: *config,
        blob_length: blob.len() as u64,
        blob_crc32: crc32fast::hash(&blob),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| WeightsError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Splits a container into its manifest and blob section without validating tensors.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), WeightsError> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| WeightsError::Format("file shorter than the 8-byte header".into()))?;
    let len = u64::from_le_bytes(header) as usize;
    let json = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| WeightsError::Format(format!("manifest of {len} bytes is truncated")))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| WeightsError::Format(format!("manifest: {e}")))?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(WeightsError::Format(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok((manifest, &bytes[8 + len..]))
}

pub fn decode_weights(bytes: &[u8]) -> Result<(VitConfig, VitParams<f32>), WeightsError> {
    let (manifest, blob) = read_manifest(bytes)?;
    if blob.len() as u64 != manifest.blob_length {
        return Err(WeightsError::Format(format!(
            "blob section holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_length
        )));
    }
    let actual = crc32fast::hash(blob);
    if actual != manifest.blob_crc32 {
        return Err(WeightsError::Checksum {
            expected: manifest.blob_crc32,
            actual,
        });
    }
    let config = manifest.config;
    config.validate()?;
    let shapes = VitWeights::shapes(&config);
    let known: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = manifest.tensors.keys().find(|k| !known.contains(k)) {
        return Err(WeightsError::UnexpectedTensor(extra.clone()));
    }
    let params = shapes.try_map(|name, shape| {
        let entry = manifest
            .tensors
            .get(name)
            .ok_or_else(|| WeightsError::MissingTensor(name.into()))?;
        if entry.dtype != "f32" {
            return Err(WeightsError::Dtype {
                name: name.into(),
                dtype: entry.dtype.clone(),
            });
        }
        if &entry.shape != shape {
            return Err(WeightsError::ShapeMismatch {
                name: name.into(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let numel: usize = shape.iter().product();
        let start = entry.offset as usize;
        let bytes = start
            .checked_add(entry.length as usize)
            .and_then(|end| blob.get(start..end))
            .filter(|b| b.len() == numel * 4)
            .ok_or_else(|| {
                WeightsError::Format(format!("tensor `{name}` has an invalid byte range"))
            })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape.clone(), data).map_err(|e| WeightsError::Format(e.to_string()))
    })?;
    Ok((config, params))
}

pub fn save_weights<T: Scalar>(config: &VitConfig, params: &VitParams<T>, path: &Path) -> Result<(), WeightsError> {
    let bytes = encode_weights(config, params)?;
    write_atomic(path, &bytes).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<(VitConfig, VitParams<f32>), WeightsError> {
    let bytes = std::fs::read(path).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_weights(&bytes)
}
