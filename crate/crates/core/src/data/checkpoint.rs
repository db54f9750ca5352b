//! Checkpoint container.
//!
//! ```text
//! magic "REARCKPT" | version u32 | header length u64 | header (JSON) |
//! array payloads (little-endian) | CRC-32 of everything before it (u32)
//! ```
//!
//! The JSON header holds the configuration snapshot, training progress, RNG
//! stream bookkeeping and a table of arrays with shapes, dtypes and offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"REARCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDtype {
    F32,
    F64,
}

impl ArrayDtype {
    pub fn size(self) -> usize {
        match self {
            ArrayDtype::F32 => 4,
            ArrayDtype::F64 => 8,
        }
    }

    pub fn from_candle(d: candle_core::DType) -> Result<Self> {
        match d {
            candle_core::DType::F32 => Ok(ArrayDtype::F32),
            candle_core::DType::F64 => Ok(ArrayDtype::F64),
            other => Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
        }
    }

    pub fn to_candle(self) -> candle_core::DType {
        match self {
            ArrayDtype::F32 => candle_core::DType::F32,
            ArrayDtype::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: ArrayDtype,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: ArrayDtype,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    progress: serde_json::Value,
    rng: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContainer {
    /// What the checkpoint holds, e.g. `"tokenizer"` or `"ar"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub progress: serde_json::Value,
    pub rng: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl CheckpointContainer {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            config: serde_json::Value::Null,
            progress: serde_json::Value::Null,
            rng: serde_json::Value::Null,
            arrays: Vec::new(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let expected = a.shape.iter().product::<usize>() * a.dtype.size();
            if a.data.len() != expected {
                return Err(Error::Config(format!("array {} has {} bytes, expected {expected}", a.name, a.data.len())));
            }
            entries.push(ArrayEntry { name: a.name.clone(), shape: a.shape.clone(), dtype: a.dtype, offset, len: a.data.len() as u64 });
            offset += a.data.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            progress: self.progress.clone(),
            rng: self.rng.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(24 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            out.extend_from_slice(&a.data);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Integrity(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint (bad magic or truncated)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version > CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint format version {version} is newer than supported version {CHECKPOINT_VERSION}"
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(fail("checkpoint CRC mismatch"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if 20 + hlen > body.len() {
            return Err(fail("checkpoint header length exceeds file"));
        }
        let header: Header = serde_json::from_slice(&body[20..20 + hlen]).map_err(|e| Error::Integrity(format!("bad checkpoint header: {e}")))?;
        let payload = &body[20 + hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut total = 0u64;
        for e in header.arrays {
            let end = (e.offset + e.len) as usize;
            if end > payload.len() || e.len as usize != e.shape.iter().product::<usize>() * e.dtype.size() {
                return Err(Error::Integrity(format!("array {} is out of bounds or mis-sized", e.name)));
            }
            total += e.len;
            arrays.push(NamedArray { name: e.name, shape: e.shape, dtype: e.dtype, data: payload[e.offset as usize..end].to_vec() });
        }
        if total as usize != payload.len() {
            return Err(fail("checkpoint payload length does not match its array table"));
        }
        Ok(Self { kind: header.kind, config: header.config, progress: header.progress, rng: header.rng, arrays })
    }
}

pub fn save_checkpoint(container: &CheckpointContainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, container.to_bytes()?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointContainer> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), hint: "checkpoint not found".into() });
    }
    CheckpointContainer::from_bytes(&std::fs::read(path)?)
}

/// Every parameter of `store` whose name starts with `prefix`, stored under
/// the same name.
pub fn store_arrays(store: &ParamStore, prefix: &str) -> Result<Vec<NamedArray>> {
    let dtype = ArrayDtype::from_candle(store.dtype())?;
    store
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| Ok(NamedArray { name: k.clone(), shape: v.as_tensor().dims().to_vec(), dtype, data: store.raw_bytes(k)? }))
        .collect()
}

/// Overwrite every parameter of `store` from the container. Missing
/// parameters, dtype or shape mismatches, and arrays that are neither
/// parameters nor named with one of the `reserved` prefixes are integrity
/// errors.
pub fn load_store_arrays(store: &ParamStore, container: &CheckpointContainer, reserved: &[&str]) -> Result<()> {
    let dtype = ArrayDtype::from_candle(store.dtype())?;
    let names = store.names();
    for name in &names {
        let a = container.array(name).ok_or_else(|| Error::Integrity(format!("checkpoint lacks parameter {name}")))?;
        if a.dtype != dtype {
            return Err(Error::Integrity(format!("dtype mismatch for {name}")));
        }
        store.load_raw(name, &a.shape, &a.data)?;
    }
    if let Some(extra) = container.arrays.iter().find(|a| !names.contains(&a.name) && !reserved.iter().any(|r| a.name.starts_with(r))) {
        return Err(Error::Integrity(format!("checkpoint holds unknown parameter {}", extra.name)));
    }
    Ok(())
}
