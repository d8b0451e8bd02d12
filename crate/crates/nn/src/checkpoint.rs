//! Binary container for named, shape-tagged arrays.
//!
//! ```text
//! magic    8 bytes  "EAGRCKPT"
//! version  u32 LE
//! meta_len u32 LE, followed by meta_len bytes of UTF-8 metadata (JSON by convention)
//! count    u32 LE
//! per array:
//!   name_len u16 LE, name bytes
//!   dtype    u8 (4 = f32, 8 = f64)
//!   ndim     u8, then ndim × u32 LE dims
//!   data     product(dims) little-endian values
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EAGRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("array {name} stored as {found}-byte floats, expected {expected}")]
    DType { name: String, found: u8, expected: u8 },
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write_params<F: Real>(mut w: impl Write, meta: &str, params: &ParamStore<F>) -> Result<(), CheckpointError> {
    let mut buf = Vec::with_capacity(16 + meta.len() + params.num_scalars() * F::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(F::TAG);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint, returning its metadata string and arrays.
pub fn read_params<F: Real>(mut r: impl Read) -> Result<(String, ParamStore<F>), CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION });
    }
    let meta_len = c.u32()? as usize;
    let meta = String::from_utf8(c.take(meta_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
    let count = c.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("array name is not UTF-8".into()))?;
        let tag = c.take(1)?[0];
        if tag != F::TAG {
            return Err(CheckpointError::DType { name, found: tag, expected: F::TAG });
        }
        let ndim = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * F::BYTES)?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        if params.find(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate array {name}")));
        }
        params.insert(name, Tensor::new(&shape, data));
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((meta, params))
}
