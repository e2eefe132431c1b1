// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint files.
//!
//! Layout: the 8-byte magic `CGLABCK1`, a little-endian `u64` header length,
//! a UTF-8 JSON header (model config, training seed, and for every tensor its
//! canonical name, shape and element offset), then every tensor's values as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CGLABCK1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn to_bytes(model: &Model, seed: u64) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: *model.config(),
        seed,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Returns the model and the seed it was trained with.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, u64)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + hlen..];
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(bad("payload length does not match header"));
    }
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| bad("tensor offset out of range"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((Model::from_parts(header.config, named)?, header.seed))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes the checkpoint and returns its SHA-256.
pub fn save(model: &Model, seed: u64, path: &Path) -> Result<String> {
    let bytes = to_bytes(model, seed)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint, also returning its SHA-256.
pub fn load(path: &Path) -> Result<(Model, u64, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, seed) = from_bytes(&bytes)?;
    Ok((model, seed, sha256_hex(&bytes)))
}
