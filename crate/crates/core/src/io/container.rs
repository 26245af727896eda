//! The `RPWT` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RPWT" | version: u32 | len: u64 | config JSON | len: u64 | directory JSON
//! | zero padding to a 64-byte boundary | tensor data
//! ```
//!
//! The directory is a JSON array of `{name, dtype, shape, offset}` with
//! offsets relative to the start of the data section. Every tensor is raw
//! `f32` and starts on a 64-byte boundary. The writer emits tensors in
//! canonical order with zero padding between them, so files it produces
//! round-trip byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NamedTensor, Transformer, WeightStore};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"RPWT";
pub const VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

pub fn encode_container<T: Scalar>(config: &ModelConfig, weights: &WeightStore<T>) -> Result<Vec<u8>> {
    weights.validate(config)?;
    let tensors = weights.to_tensors();
    let mut directory = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for t in &tensors {
        directory.push(DirectoryEntry { name: t.name.clone(), dtype: "f32".into(), shape: t.shape.clone(), offset: offset as u64 });
        offset = align(offset + 4 * t.data.len());
    }
    let config_json = serde_json::to_vec(config)?;
    let dir_json = serde_json::to_vec(&directory)?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(dir_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&dir_json);
    out.resize(align(out.len()), 0);
    let data_start = out.len();
    for (t, entry) in tensors.iter().zip(&directory) {
        out.resize(data_start + entry.offset as usize, 0);
        for &v in &t.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_container<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, WeightStore<T>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config_len = cur.u64("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len, "config")?)?;
    config.validate()?;
    let dir_len = cur.u64("directory length")? as usize;
    let directory: Vec<DirectoryEntry> = serde_json::from_slice(cur.take(dir_len, "directory")?)?;
    let data_start = align(cur.pos);
    if data_start > bytes.len() && !directory.is_empty() {
        return Err(Error::Truncated("header padding".into()));
    }

    let mut tensors = Vec::with_capacity(directory.len());
    for entry in directory {
        if entry.dtype != "f32" {
            return Err(Error::Shape(format!("tensor `{}` has unsupported dtype {:?}", entry.name, entry.dtype)));
        }
        if entry.offset as usize % ALIGNMENT != 0 {
            return Err(Error::Shape(format!("tensor `{}` offset {} is not 64-byte aligned", entry.name, entry.offset)));
        }
        let count: usize = entry.shape.iter().product();
        let start = data_start + entry.offset as usize;
        let end = start + 4 * count;
        if end > bytes.len() {
            return Err(Error::Truncated(format!(
                "tensor `{}` ends at byte {end}, file has {}",
                entry.name,
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        tensors.push(NamedTensor { name: entry.name, shape: entry.shape, data });
    }
    let weights = WeightStore::from_tensors(&config, tensors)?;
    Ok((config, weights))
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<(ModelConfig, WeightStore<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_container(&bytes)
}

pub fn load_transformer<T: Scalar>(path: &Path) -> Result<Transformer<T>> {
    let (config, weights) = load_weights(path)?;
    Transformer::new(config, weights)
}

pub fn write_weights<T: Scalar>(path: &Path, config: &ModelConfig, weights: &WeightStore<T>) -> Result<()> {
    write_atomic(path, &encode_container(config, weights)?)
}
