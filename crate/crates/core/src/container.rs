//! Binary container for bulk arrays.
//!
//! ```text
//! offset 0   8 bytes   magic "TSRELAB1"
//! offset 8   8 bytes   header length H, u64 little-endian
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          raw f64 little-endian arrays, back to back
//! ```
//!
//! The header is `{"format_version": 1, "meta": {...}, "tensors": [{"path",
//! "shape", "offset"}, ...]}` where `offset` is the byte offset of the array
//! relative to the start of the data section. Entries keep insertion order
//! and the JSON maps serialize with sorted keys, so writing the same
//! container twice produces identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"TSRELAB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    pub path: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, path: impl Into<String>, tensor: Tensor) {
        self.tensors.push((path.into(), tensor));
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    pub fn entries(&self) -> Vec<Entry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(p, t)| {
                let e = Entry {
                    path: p.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self.entries(),
        };
        let json = serde_json::to_vec(&header)?;
        let data_len: usize = self.tensors.iter().map(|(_, t)| 8 * t.numel()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing TSRELAB1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {}",
                header.format_version
            )));
        }
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * numel;
            if end > data.len() {
                return Err(Error::Format(format!("array {} runs past end of file", e.path)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.path, Tensor::new(e.shape, values)?));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
