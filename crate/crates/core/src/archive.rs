//! Single-file archive: a JSON manifest followed by concatenated TNSR records.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SKAR"
//! 4       1     version (0x01)
//! 5       3     reserved, zero
//! 8       8     u64 little-endian manifest length L
//! 16      L     manifest, UTF-8 JSON
//! 16+L    ...   TNSR records; manifest offsets are relative to this point
//! ```
//!
//! The manifest is `{"meta": <caller JSON>, "tensors": [{"name", "shape",
//! "dtype", "offset", "length"}, ...]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::tnsr::{self, AnyTensor};

pub const MAGIC: &[u8; 4] = b"SKAR";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Accumulates named tensors before writing them out.
#[derive(Debug, Default)]
pub struct ArchiveWriter {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl ArchiveWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let bytes = tnsr::encode(t)?;
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: format!("{:?}", T::DTYPE).to_lowercase(),
            offset: self.payload.len() as u64,
            length: bytes.len() as u64,
        });
        self.payload.extend_from_slice(&bytes);
        Ok(())
    }

    pub fn to_bytes(&self, meta: serde_json::Value) -> Result<Vec<u8>> {
        let manifest = Manifest { meta, tensors: self.entries.clone() };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&[0, 0, 0]);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        write_atomic(path, &self.to_bytes(meta)?)
    }
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A decoded archive.
#[derive(Debug, Clone)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Archive {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("not an archive (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported archive version {}", bytes[4])));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Format(e.to_string()))?;
        let region = &bytes[body..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let start = e.offset as usize;
            let end = start + e.length as usize;
            if end > region.len() {
                return Err(Error::Format(format!("record {} exceeds file", e.name)));
            }
            let (t, used) = tnsr::decode(&region[start..end])?;
            if used != e.length as usize || t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("record {} disagrees with manifest", e.name)));
            }
            tensors.push((e.name.clone(), t));
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Result<&AnyTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("archive has no tensor `{name}`")))
    }
}
