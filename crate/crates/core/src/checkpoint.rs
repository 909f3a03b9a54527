//! Flat binary parameter container.
//!
//! Layout: the magic `PFv1`, then for each parameter in registry order:
//! `u32` name length, UTF-8 name bytes, `u32` rank, `rank × u64` extents and
//! the `f64` payload. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFv1";

pub fn encode(params: &ParamRegistry) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed {
                format: "PFv1",
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a container; all parameters come back frozen.
pub fn decode(bytes: &[u8]) -> Result<ParamRegistry> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Malformed {
            format: "PFv1",
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let mut params = ParamRegistry::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Malformed {
                format: "PFv1",
                offset: start + 4,
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n <= (bytes.len() - r.pos) / 8)
            .ok_or_else(|| Error::Malformed {
                format: "PFv1",
                offset: r.pos,
                reason: format!("payload for `{name}` with shape {shape:?} exceeds file"),
            })?;
        let payload = r.take(numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Malformed {
            format: "PFv1",
            offset: start,
            reason: e.to_string(),
        })?;
        params.insert(name, tensor, false)?;
    }
    Ok(params)
}

pub fn save(params: &ParamRegistry, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamRegistry> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
