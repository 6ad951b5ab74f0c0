//! Little-endian array container shared by teacher/codec (`ERWT`) and
//! backbone (`ERWM`) checkpoints.
//!
//! Layout: 4-byte magic, `u32` version, `u32` array count, then per array a
//! `u32` rank, `rank` × `u32` dimensions and `product(dims)` × `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TEACHER_MAGIC: [u8; 4] = *b"ERWT";
pub const MODEL_MAGIC: [u8; 4] = *b"ERWM";
pub const VERSION: u32 = 1;

pub type Array = (Vec<usize>, Vec<f64>);

pub fn encode(magic: [u8; 4], arrays: &[Array]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (shape, values) in arrays {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Vec<Array>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        arrays.push((shape, values));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(arrays)
}

pub fn write(path: &Path, magic: [u8; 4], arrays: &[Array]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(magic, arrays))?;
    Ok(())
}

pub fn read(path: &Path, magic: [u8; 4]) -> Result<Vec<Array>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(magic, &bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
