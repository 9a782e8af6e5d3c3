//! Single-tensor feature files: `"BICF"`, u32 version, u32 rank, rank×u32
//! extents, then row-major f32 values. Everything little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"BICF";
pub const BLOB_VERSION: u32 = 1;

pub fn encode_blob(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor over a byte buffer.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                format!(
                    "truncated: needed {n} bytes at offset {}, {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                )
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_blob(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != BLOB_MAGIC {
        return Err("bad magic, expected BICF".into());
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(format!("unsupported blob version {version}"));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let shape = (0..rank)
        .map(|_| r.u32().map(|e| e as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or("extent overflow")?;
    if r.remaining() != numel * 4 {
        return Err(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            r.remaining(),
            numel * 4
        ));
    }
    let data = r
        .take(numel * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_blob(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_blob(t)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::ingest(path, format!("cannot read: {e}")))?;
    decode_blob(&bytes).map_err(|detail| Error::ingest(path, detail))
}
