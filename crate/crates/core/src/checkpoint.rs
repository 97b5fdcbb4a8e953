// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor container used for model and SAE checkpoints.
//!
//! ```text
//! "TSMI"                      4 bytes magic
//! version                     u32 little-endian
//! header length N             u32 little-endian
//! header                      N bytes UTF-8 JSON
//! payload                     little-endian f32, row-major, manifest order
//! ```
//!
//! The header is `{"kind", "config", "tensors": [{"name","shape","offset"}]}`
//! where `offset` is the byte offset of the tensor inside the payload and
//! `kind` distinguishes model (`"model"`) from SAE (`"sae"`) containers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TstModel};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"TSMI";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_MODEL: &str = "model";
pub const KIND_SAE: &str = "sae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

/// Serializes a container to bytes.
pub fn encode(kind: &str, config: serde_json::Value, tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut manifest = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        config,
        tensors: manifest,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated file".into()))
}

/// Parses a container, validating magic, version, and payload bounds.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<f32>)>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &bytes[12 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor `{}` at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let chunk = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Format(format!("truncated payload in tensor `{}`", entry.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
        expected_offset += 4 * n as u64;
    }
    if payload.len() as u64 != expected_offset {
        return Err(Error::Format(format!(
            "payload has {} trailing bytes",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok((header, tensors))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn model_to_bytes(model: &TstModel<f32>) -> Result<Vec<u8>> {
    encode(KIND_MODEL, serde_json::to_value(model.config())?, &model.named_tensors()?)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TstModel<f32>> {
    let (header, tensors) = decode(bytes)?;
    if header.kind != KIND_MODEL {
        return Err(Error::Format(format!("expected a model container, found `{}`", header.kind)));
    }
    let config: ModelConfig =
        serde_json::from_value(header.config).map_err(|e| Error::Format(format!("model config: {e}")))?;
    TstModel::from_named_tensors(config, tensors)
}

/// Writes a model checkpoint and returns its SHA-256.
pub fn save_checkpoint(model: &TstModel<f32>, path: &Path) -> Result<String> {
    let bytes = model_to_bytes(model)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<TstModel<f32>> {
    model_from_bytes(&std::fs::read(path)?)
}
