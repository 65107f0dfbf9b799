//! Model checkpoints: `"UFCK"`, version byte, u32 LE manifest length, JSON
//! manifest (config, seed, tensor table), then every parameter as f64 LE in
//! layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ToyLMConfig;
use super::model::{Layout, TensorSpec, ToyLM};
use super::LmError;
use crate::tensorio::TensorIoError;

const MAGIC: &[u8; 4] = b"UFCK";
const VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ToyLMConfig,
    seed: u64,
    tensors: Vec<TensorSpec>,
}

pub fn encode_checkpoint(model: &ToyLM) -> Vec<u8> {
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config.clone(),
        seed: model.seed,
        tensors: model.layout.tensors.clone(),
    })
    .expect("manifest serializes");
    let mut out = Vec::with_capacity(9 + manifest.len() + model.params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyLM, LmError> {
    let bad = |m: &str| LmError::Checkpoint(m.to_string());
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(bad("missing UFCK magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let end = 9usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest length exceeds file"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[9..end]).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    manifest.config.validate()?;
    let layout = Layout::new(&manifest.config);
    if layout.tensors != manifest.tensors {
        return Err(bad("tensor table does not match config"));
    }
    let payload = &bytes[end..];
    if payload.len() != layout.total * 8 {
        return Err(LmError::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            layout.total * 8
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    Ok(ToyLM {
        config: manifest.config,
        layout,
        params,
        seed: manifest.seed,
    })
}

pub fn save_checkpoint(model: &ToyLM, path: impl AsRef<Path>) -> Result<(), LmError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|source| {
        LmError::Io(TensorIoError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyLM, LmError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| {
        LmError::Io(TensorIoError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    })?;
    decode_checkpoint(&bytes)
}
