//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "LVLR"  u32 version  u32 config_len  config_json[config_len]
//! u32 tensor_count
//! per tensor (name order):
//!     u32 name_len  name[name_len]  u32 rank  u64 dims[rank]  f32 data[numel]
//! ```

use std::path::Path;

use thiserror::Error;

use crate::config::ModelConfig;
use crate::tensor::{ParamSpec, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LVLR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{extra} trailing bytes after the last tensor")]
    TrailingBytes { extra: usize },
    #[error("tensor `{name}` has shape {found:?}; the configuration expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` expected by the configuration is missing")]
    MissingTensor(String),
    #[error("tensor `{0}` is not part of the configured model")]
    UnexpectedTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Tensors in file (lexicographic) order.
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("{what} too large")))
}

/// Serializes a config and every tensor of `store`; values are written as f32.
pub fn to_bytes(config: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let json = config.to_canonical_json();
    put_u32(&mut out, len_u32(json.len(), "config")?);
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, len_u32(store.len(), "tensor count")?);
    for (name, t) in store.iter() {
        put_u32(&mut out, len_u32(name.len(), "name")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, len_u32(t.rank(), "rank")?);
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            });
        };
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

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| {
        let mut m = [0u8; 4];
        m[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
        CheckpointError::BadMagic(m)
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.try_into().expect("4 bytes")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json = r.string("config")?;
    let config =
        ModelConfig::from_json(&json).map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let dim = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed("dimension overflow".into()))?;
            shape.push(dim);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or(CheckpointError::Malformed("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
        if tensors.last().is_some_and(|(prev, _): &(String, Tensor)| *prev >= name) {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{name}` out of order or repeated"
            )));
        }
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            extra: bytes.len() - r.pos,
        });
    }
    Ok(Checkpoint { config, tensors })
}

impl Checkpoint {
    /// Builds a store after checking every tensor against `specs`.
    pub fn into_store(self, specs: &[ParamSpec]) -> Result<ParamStore, CheckpointError> {
        let mut store = ParamStore::new(self.config.precision);
        let mut by_name: std::collections::BTreeMap<String, Tensor> = self.tensors.into_iter().collect();
        for spec in specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| CheckpointError::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            store
                .insert(&spec.name, t)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        if let Some(name) = by_name.into_keys().next() {
            return Err(CheckpointError::UnexpectedTensor(name));
        }
        Ok(store)
    }
}

pub fn save(path: &Path, config: &ModelConfig, store: &ParamStore) -> crate::Result<()> {
    std::fs::write(path, to_bytes(config, store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> crate::Result<Checkpoint> {
    Ok(from_bytes(&std::fs::read(path)?)?)
}
