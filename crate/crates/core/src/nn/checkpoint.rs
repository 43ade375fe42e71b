//! Checkpoint files.
//!
//! ```text
//! magic     8 bytes  "FPICKPT\0"
//! length    u64 LE   byte length of the JSON header
//! header    JSON     format version, model config, tensor names/shapes/kinds
//! payload   f32 LE   all tensors concatenated in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams, ParamKind, ParamTensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FPICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                kind: t.kind,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let payload: usize = params.tensors.iter().map(|t| t.data.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let bad = |msg: &str| Error::InvalidData(format!("checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let mut payload = body[len..].chunks_exact(4);
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected || !payload.remainder().is_empty() {
        return Err(bad(&format!(
            "payload holds {} bytes, header describes {} floats",
            body.len() - len,
            expected
        )));
    }
    let tensors = header
        .tensors
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let data = payload
                .by_ref()
                .take(n)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            ParamTensor {
                name: e.name,
                shape: e.shape,
                kind: e.kind,
                data,
            }
        })
        .collect();
    let params = ModelParams {
        config: header.config,
        tensors,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
