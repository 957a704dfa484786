//! Named-tensor binary bundles.
//!
//! Layout: 4-byte magic, u32 version, u32 header length, JSON header, then
//! little-endian f32 payloads. The header is `{"meta": ..., "tensors": [...]}`
//! where each directory entry is `{name, dtype, shape, offset}` and `offset`
//! counts bytes from the start of the payload section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: [u8; 4] = *b"PGT1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PGTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Default for Bundle {
    fn default() -> Self {
        Self::new(Value::Null)
    }
}

impl Bundle {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Fetch a tensor and check its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self, magic: [u8; 4]) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), offset });
            offset += t.len() * 4;
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(&magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4], label: &str) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { path: label.to_string(), reason };
        if bytes.len() < 12 {
            return Err(corrupt(format!("file is {} bytes, too short for a header", bytes.len())));
        }
        if bytes[..4] != magic {
            return Err(corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| corrupt(format!("header is not valid JSON: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        let mut expected_end = 0;
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(corrupt(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let end = e.offset + count * 4;
            if end > payload.len() {
                return Err(corrupt(format!("tensor `{}` is truncated", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_end = expected_end.max(end);
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        if expected_end != payload.len() {
            return Err(corrupt(format!(
                "payload is {} bytes, directory describes {expected_end}",
                payload.len()
            )));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path, magic: [u8; 4]) -> Result<()> {
        let bytes = self.to_bytes(magic)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic, &path.display().to_string())
    }
}
