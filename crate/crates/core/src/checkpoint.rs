//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `GRCKPT01`, a little-endian `u64` header length,
//! a JSON header, then every tensor's values as little-endian `f64` in header
//! order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::sequencer::{hex_digest, Vocabulary};

const MAGIC: &[u8; 8] = b"GRCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub adapter_sets: Vec<String>,
    pub active_adapter: Option<String>,
    pub tensors: Vec<TensorMeta>,
}

pub fn to_bytes(params: &ModelParameters, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: params.config().clone(),
        vocab_hash: vocab.hash(),
        adapter_sets: params.adapter_names(),
        active_adapter: params.active_adapter().map(str::to_string),
        tensors: params
            .tensors()
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                rows: t.value.nrows(),
                cols: t.value.ncols(),
                trainable: t.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n: usize = params.tensors().iter().map(|t| t.value.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, params: &ModelParameters, vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params, vocab)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    Ok((header, end))
}

/// Rebuilds parameters from bytes, checking tensor shapes against the stored
/// config and, when `vocab` is given, the vocabulary hash.
pub fn from_bytes(bytes: &[u8], vocab: Option<&Vocabulary>) -> Result<ModelParameters> {
    let (header, mut off) = read_header(bytes)?;
    if let Some(v) = vocab {
        if v.hash() != header.vocab_hash {
            return Err(bad("vocabulary hash does not match the checkpoint"));
        }
        if v.len() != header.config.vocab_size {
            return Err(bad("vocabulary size does not match the checkpoint"));
        }
    }
    let mut params = ModelParameters::new(header.config.clone())?;
    for name in &header.adapter_sets {
        params.add_adapter_set(name)?;
    }
    if params.tensors().len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, header lists {}",
            params.tensors().len(),
            header.tensors.len()
        )));
    }
    for (t, meta) in params.tensors_mut().iter_mut().zip(&header.tensors) {
        if t.name != meta.name || t.value.dim() != (meta.rows, meta.cols) {
            return Err(bad(format!(
                "tensor {} {:?} does not match stored {} ({}, {})",
                t.name,
                t.value.dim(),
                meta.name,
                meta.rows,
                meta.cols
            )));
        }
        let n = meta.rows * meta.cols;
        let end = off + 8 * n;
        if end > bytes.len() {
            return Err(bad(format!("data for {} truncated", meta.name)));
        }
        let vals: Vec<f64> = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        t.value = Array2::from_shape_vec((meta.rows, meta.cols), vals)
            .map_err(|e| Error::Shape(e.to_string()))?;
        t.trainable = meta.trainable;
        off = end;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    params.set_active_adapter(header.active_adapter.as_deref())?;
    Ok(params)
}

pub fn load(path: impl AsRef<Path>, vocab: Option<&Vocabulary>) -> Result<ModelParameters> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, vocab)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}
