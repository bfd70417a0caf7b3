//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"NSCK"
//! version u32            (currently 1)
//! count   u32
//! count × {
//!     name_len u32, name bytes (UTF-8),
//!     rank u32, rank × dim u64,
//!     prod(dims) × f64
//! }
//! ```

use std::io::{Read, Write};

use super::optim::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters in the given order.
pub fn write_checkpoint<W: Write>(mut out: W, params: &[&Parameter]) -> std::io::Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        let shape = p.value.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.buf.len() as u64, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint into `(name, tensor)` entries.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::format(0, format!("read failed: {e}")))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32("count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = cur.pos as u64;
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(at + 4, "parameter name is not UTF-8"))?
            .to_owned();
        let rank_at = cur.pos as u64;
        let rank = cur.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::format(rank_at, format!("unsupported rank {rank}")));
        }
        let mut shape = [1usize; 4];
        for slot in shape.iter_mut().skip(4 - rank) {
            *slot = cur.u64("dimension")? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    if cur.pos != buf.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after last parameter"));
    }
    Ok(entries)
}

/// Copies checkpoint entries into `params` by name. Every parameter must be
/// present with a matching shape.
pub fn load_into(entries: &[(String, Tensor)], params: &mut [&mut Parameter]) -> Result<()> {
    for p in params.iter_mut() {
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == p.name)
            .ok_or_else(|| Error::param(format!("checkpoint lacks parameter {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::param(format!(
                "checkpoint shape {:?} for {} does not match {:?}",
                t.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.set_value(t.clone());
    }
    Ok(())
}
