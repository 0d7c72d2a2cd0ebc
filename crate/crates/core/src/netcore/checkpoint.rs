//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "RGANCKPT"
//! version  u32      1
//! meta_len u64
//! meta     meta_len bytes of UTF-8 JSON
//! count    u32      number of tensors
//! tensor   repeated `count` times:
//!            name_len u32, name (UTF-8),
//!            ndim u32, dims u64 × ndim,
//!            data f64 × prod(dims)
//! ```
//! Integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RGANCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ck.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, what: &'static str) -> Result<&'a [u8]> {
        let available = (self.bytes.len() - self.pos) as u64;
        if n > available {
            return Err(Error::Truncated {
                what,
                needed: self.pos as u64 + n,
                available: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "checkpoint header").map_err(|e| {
        if bytes.len() >= 4 && bytes[..4] != MAGIC[..4] {
            bad_magic(bytes)
        } else {
            e
        }
    })?;
    if magic != MAGIC {
        return Err(bad_magic(bytes));
    }
    let version = r.u32("checkpoint header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            version,
        });
    }
    let meta_len = r.u64("checkpoint header")?;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len, "checkpoint metadata")?).map_err(|e| Error::Malformed {
        what: "checkpoint metadata",
        detail: e.to_string(),
    })?;
    let count = r.u32("checkpoint tensor count")?;
    let mut seen = HashSet::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("checkpoint tensor name")?;
        let name = std::str::from_utf8(r.take(name_len.into(), "checkpoint tensor name")?)
            .map_err(|e| Error::Malformed {
                what: "checkpoint tensor name",
                detail: e.to_string(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("duplicate tensor {name}"),
            });
        }
        let ndim = r.u32("checkpoint tensor shape")?;
        let mut shape = Vec::new();
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = r.u64("checkpoint tensor shape")?;
            numel = numel.checked_mul(d).ok_or_else(|| Error::Malformed {
                what: "checkpoint tensor shape",
                detail: format!("{name} has an overflowing element count"),
            })?;
            shape.push(d as usize);
        }
        let bytes_needed = numel.checked_mul(8).ok_or_else(|| Error::Malformed {
            what: "checkpoint tensor shape",
            detail: format!("{name} is too large"),
        })?;
        let raw = r.take(bytes_needed, "checkpoint tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingData {
            what: "checkpoint",
            extra: (bytes.len() - r.pos) as u64,
        });
    }
    Ok(Checkpoint { meta, tensors })
}

fn bad_magic(bytes: &[u8]) -> Error {
    Error::BadMagic {
        what: "checkpoint",
        expected: MAGIC.to_vec(),
        found: bytes[..8.min(bytes.len())].to_vec(),
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
