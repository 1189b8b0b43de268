//! Flat binary checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header describing every tensor, then the raw
//! little-endian `f32` payload in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use hpt_core::per_module::ModuleType;
use hpt_core::scaling::TensorRole;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, Param, TensorHp};
use crate::optim::{AdamState, DecayVariant};
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"HPTCKPT1";
pub const FORMAT: &str = "hpt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub slot: Slot,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: TensorRole,
    pub module: ModuleType,
    #[serde(default)]
    pub block: Option<usize>,
    pub hp: TensorHp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub variant: DecayVariant,
    pub updates: u64,
    pub residual: Vec<(f32, f32)>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(3 * trainer.model.params.len());
    let mut payload: Vec<&[f32]> = Vec::with_capacity(tensors.capacity());
    for slot in [Slot::Param, Slot::AdamFirst, Slot::AdamSecond] {
        for (i, p) in trainer.model.params.iter().enumerate() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                slot,
                shape: p.shape.clone(),
                dtype: "f32".into(),
                role: p.role,
                module: p.module,
                block: p.block,
                hp: p.hp,
            });
            payload.push(match slot {
                Slot::Param => &p.data,
                Slot::AdamFirst => &trainer.opt.first[i],
                Slot::AdamSecond => &trainer.opt.second[i],
            });
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        model: trainer.model.cfg.clone(),
        variant: trainer.variant,
        updates: trainer.opt.count,
        residual: trainer.model.residual.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * payload.iter().map(|t| t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        out.extend(t.iter().flat_map(|x| x.to_le_bytes()));
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer, CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or(CheckpointError::Truncated)?;
    let json = bytes.get(16..header_end).ok_or(CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CheckpointError::Header(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut cursor = header_end;
    let mut params = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(CheckpointError::Header(format!("tensor {} has dtype {}", t.name, t.dtype)));
        }
        let len: usize = t.shape.iter().product();
        let end = cursor.checked_add(4 * len).ok_or(CheckpointError::Truncated)?;
        let raw = bytes.get(cursor..end).ok_or(CheckpointError::Truncated)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        cursor = end;
        match t.slot {
            Slot::Param => params.push(Param {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data,
                role: t.role,
                module: t.module,
                block: t.block,
                hp: t.hp,
            }),
            Slot::AdamFirst => first.push(data),
            Slot::AdamSecond => second.push(data),
        }
    }
    if cursor != bytes.len() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    let model = Model::from_parts(header.model, params, header.residual).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let shapes_match = |state: &[Vec<f32>]| state.len() == model.params.len() && state.iter().zip(&model.params).all(|(s, p)| s.len() == p.data.len());
    if !shapes_match(&first) || !shapes_match(&second) {
        return Err(CheckpointError::Header("optimiser state does not match parameters".into()));
    }
    Ok(Trainer {
        model,
        opt: AdamState { first, second, count: header.updates },
        variant: header.variant,
    })
}

/// Write atomically via a temporary file in the same directory.
pub fn save(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&to_bytes(trainer))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
