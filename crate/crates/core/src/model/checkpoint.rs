//! Binary checkpoint:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `HCTM` |
//! | 4 | format version, u32 LE |
//! | 4 | header length `H`, u32 LE |
//! | H | UTF-8 JSON header: config, seed, gate state, parameter names and shapes |
//! | 8 | scalar count `N`, u64 LE |
//! | 4·N | parameter values as f32 LE, in declared order |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HctConfig, Model};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gating::GateState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCTM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: HctConfig,
    seed: u64,
    gate: Option<GateState>,
    params: Vec<ParamEntry>,
}

/// A model with its gate bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub gate: Option<GateState>,
}

pub fn save_checkpoint(path: &Path, model: &Model, seed: u64, gate: Option<&GateState>) -> Result<()> {
    let store = model.store();
    let header = Header {
        config: model.config().clone(),
        seed,
        gate: gate.cloned(),
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = store.num_scalars();
    let mut bytes = Vec::with_capacity(20 + json.len() + 4 * n);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    for t in store.tensors() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    let take = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or_else(|| {
            fail(
                bytes.len().min(offset),
                format!("expected {} bytes, found {}", offset + len, bytes.len()),
            )
        })
    };
    if take(0, 4)? != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(4, format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(12, header_len)?)
        .map_err(|e| fail(12, format!("header: {e}")))?;
    let mut offset = 12 + header_len;
    let n = u64::from_le_bytes(take(offset, 8)?.try_into().unwrap()) as usize;
    offset += 8;

    let mut model = Model::new(&header.config, header.seed)?;
    let store = model.store_mut();
    let layout_matches = store.len() == header.params.len()
        && store
            .iter()
            .zip(&header.params)
            .all(|((name, t), e)| name == e.name && t.shape() == e.shape.as_slice());
    if !layout_matches || n != store.num_scalars() {
        return Err(fail(12, "parameter layout does not match the configured architecture".into()));
    }
    let expected = offset + 4 * n;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        let values = bytes[offset..offset + 4 * t.len()]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        offset += 4 * t.len();
        *t = Tensor::new(&shape, values)?;
    }
    Ok(Checkpoint {
        model,
        seed: header.seed,
        gate: header.gate,
    })
}
