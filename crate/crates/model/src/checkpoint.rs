//! Binary checkpoints: magic, format version, a JSON header describing the
//! configuration and parameter layout, then every parameter as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use groundkit_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModelConfig, Variant};
use crate::model::Model;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"GKCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    variant: Variant,
    params: Vec<Entry>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        variant: model.variant.clone(),
        params: model
            .params
            .iter()
            .map(|(id, name, t)| Entry {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
                frozen: model.params.is_frozen(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| corrupt("header truncated"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut data = &bytes[16 + len..];
    let mut params = ParamStore::new();
    for e in &header.params {
        let n = e.rows * e.cols;
        if data.len() < 8 * n {
            return Err(corrupt(&format!("data for {} truncated", e.name)));
        }
        let vals = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        let id = params.add(e.name.clone(), Tensor::from_vec(e.rows, e.cols, vals));
        params.set_frozen(id, e.frozen);
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Model {
        vocab: Vocab::new(header.config.signature_count),
        config: header.config,
        variant: header.variant,
        params,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
