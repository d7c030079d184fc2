//! Named-tensor container: magic `CKPT`, version, count, then per entry a
//! u16-length UTF-8 name, u8 rank, u32 dims and binary32 values, all
//! little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("rank too large for `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large in `{name}`")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"CKPT\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint entries",
            buf.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}
