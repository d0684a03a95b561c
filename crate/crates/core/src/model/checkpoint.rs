//! Checkpoint layout: `u32` little-endian header length, the JSON header,
//! then every parameter as a little-endian `f32`, block by block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, Model, ModelSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub n_users: usize,
    pub n_items: usize,
    pub seed: u64,
    pub step: u64,
    pub n_params: usize,
}

pub fn save_checkpoint(model: &Model, seed: u64, step: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model: model.spec(),
        n_users: model.n_users(),
        n_items: model.n_items(),
        seed,
        step,
        n_params: model.params().len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(4 + json.len() + 4 * header.n_params);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for x in model.params().values() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Restores a checkpoint. CDAE histories are not stored; call
/// [`Model::set_history`] before predicting.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Shape(format!("{}: {m}", path.display()));
    if bytes.len() < 4 {
        return Err(corrupt("truncated header"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + len).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let floats = &bytes[4 + len..];
    if floats.len() != 4 * header.n_params {
        return Err(corrupt("parameter payload has the wrong length"));
    }
    let mut model = init_params(&header.model, header.n_users, header.n_items, 0)?;
    if model.params().len() != header.n_params {
        return Err(corrupt("header dimensions disagree with parameter count"));
    }
    let mut chunks = floats.chunks_exact(4);
    for b in &mut model.params_mut().blocks {
        for x in &mut b.data {
            *x = f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap()) as f64;
        }
    }
    Ok((model, header))
}
