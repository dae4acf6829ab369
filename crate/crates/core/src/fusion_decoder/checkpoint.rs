//! Binary checkpoints: `HCVCCKPT`, u32 version, u64 config length, config
//! JSON, u32 tensor count, then per tensor u32 name length, name, u8
//! trainable flag, u32 rows, u32 cols and row-major little-endian f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use super::{init_params, Model, ModelConfig};
use crate::numerics::ParamStore;

const MAGIC: &[u8; 8] = b"HCVCCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint is malformed: {0}")]
    Format(String),
    #[error("checkpoint version {0} is not supported (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint does not match its config: {0}")]
    Layout(String),
}

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        let [r, c] = p.tensor.shape();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in p.tensor.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint and checks every tensor name, shape and trainable
/// flag against the layout implied by its config.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
    let skeleton = init_params(&config, None, 0).map_err(CheckpointError::Layout)?;

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Format(format!("{name}: trainable flag {b}"))),
        };
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let expected = skeleton
            .get(&name)
            .ok_or_else(|| CheckpointError::Layout(format!("unexpected tensor {name}")))?;
        if expected.tensor.shape() != [rows, cols] || expected.trainable != trainable {
            return Err(CheckpointError::Layout(format!(
                "{name}: {rows}x{cols} (trainable {trainable}), expected {:?} (trainable {})",
                expected.tensor.shape(),
                expected.trainable
            )));
        }
        let data: Vec<f64> = r
            .take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Format(format!("{name}: non-finite value")));
        }
        params.insert(name, Array2::from_shape_vec((rows, cols), data).expect("length matches"), trainable);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(missing) = skeleton.names().find(|n| params.get(n).is_none()) {
        return Err(CheckpointError::Layout(format!("missing tensor {missing}")));
    }
    Ok(Model { config, params })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(model)).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    read_checkpoint(&bytes)
}
