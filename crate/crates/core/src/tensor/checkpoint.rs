//! Versioned binary container for named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "IDRCKPT\0"
//! version          u32
//! parameter count  u32
//! per parameter:   name length u32, UTF-8 name, rank u32,
//!                  extents u32 × rank, values f32 × Π extents
//! metadata length  u32, metadata bytes (UTF-8 JSON)
//! crc32            u32 over every preceding byte
//! ```

use super::Tensor;
use crate::error::{IdrError, Result};

pub const MAGIC: [u8; 8] = *b"IDRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &[(String, Tensor<f32>)], metadata: &[u8]) -> Vec<u8> {
    let values: usize = params.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(32 + values * 4 + metadata.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(IdrError::format(format!(
                "truncated checkpoint while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Named tensors in file order.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

/// Decodes a checkpoint, returning its tensors and metadata blob.
pub fn decode(bytes: &[u8]) -> Result<(NamedTensors, Vec<u8>)> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(IdrError::format("not a checkpoint: bad magic"));
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(IdrError::format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    if bytes.len() < 16 {
        return Err(IdrError::format("truncated checkpoint"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(IdrError::format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x} (file corrupt or truncated)"
        )));
    }
    let count = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| IdrError::format(format!("parameter {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let metadata = r.take(meta_len, "metadata")?.to_vec();
    if r.pos != body_end {
        return Err(IdrError::format(format!(
            "checkpoint size mismatch: payload ends at {} but file has {} bytes",
            r.pos + 4,
            bytes.len()
        )));
    }
    Ok((params, metadata))
}
