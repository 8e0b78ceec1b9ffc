//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EVAX" | version: u32 | metadata_len: u64 | metadata (UTF-8 JSON) | payload
//! ```
//!
//! The metadata object carries a `tensors` map from tensor name to
//! `{dtype: "f32", shape, offset, length}` (byte offsets relative to the
//! payload start) plus free-form entries such as `vit_config`, `step` and
//! `rng`. The JSON is padded with trailing spaces so the payload starts on an
//! 8-byte boundary, and every tensor offset is a multiple of 8.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVAX";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// Entries other than the tensor table.
    pub metadata: BTreeMap<String, Value>,
    /// Tensors in payload order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("metadata key `{key}` missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Integrity(format!("metadata key `{key}`: {e}")))
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).expect("metadata values serialize");
        self.metadata.insert(key.to_string(), v);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table = serde_json::Map::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = (t.len() * 4) as u64;
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            table.insert(name.clone(), serde_json::to_value(entry).unwrap());
            offset += length.div_ceil(8) * 8;
        }
        let mut meta = serde_json::Map::new();
        for (k, v) in &self.metadata {
            meta.insert(k.clone(), v.clone());
        }
        meta.insert("tensors".into(), Value::Object(table));
        let mut json = serde_json::to_vec(&Value::Object(meta)).unwrap();
        while !(HEADER_LEN + json.len()).is_multiple_of(8) {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            while !(out.len() - HEADER_LEN - json.len()).is_multiple_of(8) {
                out.push(0);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = (HEADER_LEN as u64)
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or(Error::Truncated)? as usize;
        if !payload_start.is_multiple_of(8) {
            return Err(Error::Integrity("payload is not 8-byte aligned".into()));
        }
        let meta: Value = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| Error::Integrity(format!("metadata is not valid JSON: {e}")))?;
        let Value::Object(mut meta) = meta else {
            return Err(Error::Integrity("metadata is not a JSON object".into()));
        };
        let table = meta
            .remove("tensors")
            .ok_or_else(|| Error::Integrity("metadata has no tensor table".into()))?;
        let table: BTreeMap<String, TensorEntry> =
            serde_json::from_value(table).map_err(|e| Error::Integrity(format!("tensor table: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut entries: Vec<(String, TensorEntry)> = table.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut tensors = Vec::with_capacity(entries.len());
        let mut cursor = 0u64;
        for (name, e) in entries {
            if e.dtype != "f32" {
                return Err(Error::Integrity(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Integrity(format!("{name}: shape overflows")))?;
            if count.checked_mul(4) != Some(e.length) {
                return Err(Error::Integrity(format!(
                    "{name}: shape {:?} needs {} bytes but entry declares {}",
                    e.shape,
                    count.saturating_mul(4),
                    e.length
                )));
            }
            if e.offset % 8 != 0 || e.offset < cursor {
                return Err(Error::Integrity(format!("{name}: bad offset {}", e.offset)));
            }
            let end = e.offset.checked_add(e.length).ok_or_else(|| Error::Integrity(format!("{name}: offset overflows")))?;
            if end > payload.len() as u64 {
                return Err(Error::Truncated);
            }
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::from_parts(e.shape, data)));
            cursor = end;
        }
        Ok(Checkpoint {
            metadata: meta.into_iter().collect(),
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
