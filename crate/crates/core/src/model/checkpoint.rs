//! Checkpoint files: `"QRNK"`, u32 version, u32 metadata length, JSON
//! metadata, then every parameter as little-endian f32 in layout order.

use std::fs;
use std::path::Path;

use super::{ModelParams, PARAM_COUNT};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QRNK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(
    params: &ModelParams<f32>,
    metadata: &serde_json::Value,
) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata)?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| Error::Config("checkpoint metadata exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + meta.len() + PARAM_COUNT * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    for t in params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, serde_json::Value)> {
    let truncated = |expected: usize| Error::Truncated {
        what: "checkpoint",
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(12));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "QRNK".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12usize.saturating_add(meta_len);
    let total = body.saturating_add(PARAM_COUNT * 4);
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(Error::Shape(format!(
            "{} trailing bytes after {PARAM_COUNT} parameters",
            bytes.len() - total
        )));
    }
    let metadata: serde_json::Value = serde_json::from_slice(&bytes[12..body])?;
    let values: Vec<f32> = bytes[body..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_flat(&values)?;
    if !params.all_finite() {
        return Err(Error::Domain(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok((params, metadata))
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    metadata: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(params, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_checkpoint(&bytes)
}
