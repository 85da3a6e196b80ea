//! Binary tensor container.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "MDLC" | version: u32 | count: u32 |
//!   count x ( name_len: u32 | name: utf-8 | rank: u32 | dims: u64 x rank | payload: f32 x prod(dims) )
//! ```

use std::fs;
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl CheckpointEntry {
    pub fn from_tensor<T: Float>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        CheckpointEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| T::lit(v as f64)).collect()).expect("validated on decode")
    }
}

pub fn encode_checkpoint(entries: &[CheckpointEntry]) -> Vec<u8> {
    let payload: usize = entries
        .iter()
        .map(|e| 12 + e.name.len() + 8 * e.shape.len() + 4 * e.data.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::format(path, "dimension overflow"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, "element count overflow"))?;
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(path, "payload overflow"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    fs::write(path, encode_checkpoint(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let buf = fs::read(path)?;
    decode_checkpoint(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let e = CheckpointEntry {
            name: "w".into(),
            shape: vec![2],
            data: vec![1.0, -2.0],
        };
        let bytes = encode_checkpoint(&[e]);
        let mut expect = b"MDLC".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'w');
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        assert!(decode_checkpoint(b"XXXX\x01\0\0\0\0\0\0\0", p).is_err());
        let e = CheckpointEntry {
            name: "a".into(),
            shape: vec![3],
            data: vec![0.0; 3],
        };
        let bytes = encode_checkpoint(&[e]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
    }
}
