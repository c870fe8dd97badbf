//! Versioned parameter container shared by the segmenter and the diffusion
//! model: `DGLC`, u32 version, u32 header length, JSON header, u64 parameter
//! count, then little-endian f32 parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::formats::write_atomic;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `segmodel` or `diffusion`.
    pub kind: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub width: usize,
    /// Hash of the configuration that produced the parameters.
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub iteration: Option<usize>,
    /// Model-specific settings.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::format(12, e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + params.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f32>)> {
    let short = |what: &str| Error::format(bytes.len() as u64, format!("truncated while reading {what}"));
    if bytes.len() < 12 {
        return Err(short("header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hend = 12 + hlen;
    if bytes.len() < hend + 8 {
        return Err(short("header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..hend]).map_err(|e| Error::format(12, e.to_string()))?;
    let n = u64::from_le_bytes(bytes[hend..hend + 8].try_into().expect("8 bytes")) as usize;
    let start = hend + 8;
    let end = n.checked_mul(4).and_then(|b| b.checked_add(start)).ok_or_else(|| short("parameters"))?;
    if bytes.len() != end {
        return Err(if bytes.len() < end {
            short("parameters")
        } else {
            Error::format(end as u64, "trailing bytes after parameters")
        });
    }
    let params = bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, params))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f32]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(header, params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_checkpoint(&bytes).map_err(|e| e.at(path))
}
