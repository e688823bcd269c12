//! Raw tensor serialization: little-endian f32 in row-major order,
//! described by JSON manifest entries.

use std::collections::BTreeMap;

use acat_core::Tensor;
use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

/// Concatenates named tensors into one blob with a manifest entry each.
pub fn encode_tensors(named: &[(String, Tensor)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(named.len());
    let mut blob = Vec::new();
    for (name, t) in named {
        let offset = blob.len() as u64;
        for v in t.to_vec() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    (entries, blob)
}

pub fn decode_tensors(
    entries: &[TensorEntry],
    blob: &[u8],
) -> Result<BTreeMap<String, Vec<f32>>> {
    let mut out = BTreeMap::new();
    for e in entries {
        if e.dtype != "f32" {
            bail!("tensor {}: unsupported dtype {:?}", e.name, e.dtype);
        }
        let numel: usize = e.shape.iter().product();
        if e.length as usize != numel * 4 {
            bail!(
                "tensor {}: {} bytes do not match shape {:?}",
                e.name,
                e.length,
                e.shape
            );
        }
        let lo = e.offset as usize;
        let hi = lo + e.length as usize;
        if hi > blob.len() {
            bail!(
                "tensor {}: bytes {lo}..{hi} outside blob of {} bytes",
                e.name,
                blob.len()
            );
        }
        let data = decode_f32(&blob[lo..hi]);
        if out.insert(e.name.clone(), data).is_some() {
            bail!("duplicate tensor {}", e.name);
        }
    }
    Ok(out)
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
