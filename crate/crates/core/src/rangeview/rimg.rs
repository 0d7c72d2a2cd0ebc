//! `.rimg` container.
//!
//! ```text
//! magic    4 bytes  "RIMG"
//! version  u16      1
//! roles    u16      channel-role bitmap; channels appear in bit order
//! height   u32
//! width    u32
//! channels u32      must equal popcount(roles)
//! data     H·W·C    f32, row-major, channels interleaved
//! valid    H·W      u8, 0 or 1
//! ```
//! All integers and floats are little-endian. Values are stored as `f32`,
//! so writing an `f64` image is lossy; re-encoding a decoded image is
//! byte-identical.

use std::fs;
use std::path::Path;

use super::image::{ChannelRole, RangeImage};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RIMG";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4;

pub fn encode_rimg(image: &RangeImage) -> Vec<u8> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * c * 4 + h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ChannelRole::bitmap(image.roles()).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(image.valid().iter().map(|&v| u8::from(v)));
    out
}

pub fn decode_rimg(bytes: &[u8]) -> Result<RangeImage> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(bad_magic(bytes));
        }
        return Err(Error::Truncated {
            what: "rimg header",
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(bad_magic(bytes));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "rimg",
            version: version.into(),
        });
    }
    let roles = ChannelRole::from_bitmap(u16_at(6))?;
    let (h, w, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    if c != roles.len() {
        return Err(Error::DimensionMismatch {
            what: "rimg",
            detail: format!("header declares {c} channels but role bitmap names {}", roles.len()),
        });
    }
    let cells = (h as u64) * (w as u64);
    let needed = HEADER_LEN as u64 + cells * c as u64 * 4 + cells;
    let available = bytes.len() as u64;
    if available < needed {
        return Err(Error::Truncated {
            what: "rimg body",
            needed,
            available,
        });
    }
    if available > needed {
        return Err(Error::TrailingData {
            what: "rimg",
            extra: available - needed,
        });
    }
    let cells = cells as usize;
    let body = &bytes[HEADER_LEN..HEADER_LEN + cells * c * 4];
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mut valid = Vec::with_capacity(cells);
    for &b in &bytes[HEADER_LEN + cells * c * 4..] {
        match b {
            0 => valid.push(false),
            1 => valid.push(true),
            other => {
                return Err(Error::Malformed {
                    what: "rimg validity",
                    detail: format!("byte {other} is not 0 or 1"),
                })
            }
        }
    }
    RangeImage::from_parts(h, w, roles, data, valid)
}

fn bad_magic(bytes: &[u8]) -> Error {
    Error::BadMagic {
        what: "rimg",
        expected: MAGIC.to_vec(),
        found: bytes[..4.min(bytes.len())].to_vec(),
    }
}

pub fn write_rimg(image: &RangeImage, path: &Path) -> Result<()> {
    crate::dataio::write_file(path, &encode_rimg(image))
}

pub fn read_rimg(path: &Path) -> Result<RangeImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rimg(&bytes)
}
