//! Checkpoint file: an 8-byte little-endian header length, a JSON header
//! (model config plus a parameter manifest with names, shapes and offsets),
//! then a single little-endian f32 payload holding all parameters in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SegNet};
use crate::error::{CoreError, Result};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    len: usize,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    payload_len: usize,
}

pub fn save_checkpoint(model: &SegNet, path: &Path) -> Result<()> {
    let params = model.params();
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    let mut offset = 0usize;
    for p in &params {
        entries.push(ParamEntry {
            name: p.name.to_string(),
            len: p.value.len(),
            offset,
        });
        for &x in p.value {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
        offset += p.value.len();
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params: entries,
        payload_len: offset,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(CoreError::format(path, "truncated checkpoint"));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CoreError::format(path, "header exceeds file size"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| CoreError::json(path, e))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(CoreError::format(
            path,
            format!("unknown checkpoint version {}", header.format_version),
        ));
    }
    let payload = &bytes[8 + header_len..];
    if payload.len() != header.payload_len * 4 {
        return Err(CoreError::format(
            path,
            format!(
                "payload size {} does not match manifest ({} f32 values)",
                payload.len(),
                header.payload_len
            ),
        ));
    }
    // Parameters are created by init and then overwritten; the seed is moot.
    let mut model = SegNet::init(&header.config, 0)?;
    {
        let mut params = model.params_mut();
        if params.len() != header.params.len() {
            return Err(CoreError::format(path, "parameter manifest mismatch"));
        }
        for (p, entry) in params.iter_mut().zip(header.params.iter()) {
            if p.value.len() != entry.len {
                return Err(CoreError::format(
                    path,
                    format!(
                        "parameter {} has {} values, manifest says {}",
                        entry.name,
                        p.value.len(),
                        entry.len
                    ),
                ));
            }
            for (j, x) in p.value.iter_mut().enumerate() {
                let at = (entry.offset + j) * 4;
                let raw = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
                *x = raw as f64;
            }
        }
    }
    Ok(model)
}
