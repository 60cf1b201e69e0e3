//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "RTGTCKPT"
//! version    u32      1
//! meta_len   u64      length of the metadata record
//! meta       bytes    UTF-8 JSON object
//! count      u32      number of parameters
//! repeated `count` times:
//!   name_len u32, name (UTF-8)
//!   dtype    u8       0 = f32, 1 = f64
//!   ndim     u32, dims (u64 each)
//!   payload  prod(dims) scalars of `dtype`
//! ```

use std::io::{Read, Write};

use serde_json::Value;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RTGTCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<F: Scalar, W: Write>(mut w: W, store: &ParamStore<F>, meta: &Value) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(F::DTYPE.tag());
        buf.extend_from_slice(&(p.tensor.ndim() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read a checkpoint, converting payloads to `F` when the stored dtype differs.
pub fn read_checkpoint<F: Scalar, R: Read>(mut r: R) -> Result<(ParamStore<F>, Value)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = c.u64()? as usize;
    let meta: Value = serde_json::from_slice(c.take(meta_len)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|e| NnError::Checkpoint(e.to_string()))?.to_string();
        let dtype = DType::from_tag(c.take(1)?[0]).ok_or_else(|| NnError::Checkpoint("unknown dtype".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = c.take(n * dtype.size())?;
        let data: Vec<F> = match dtype {
            DType::F32 => payload.chunks(4).map(|b| F::from_f64(f32::read_le(b) as f64)).collect(),
            DType::F64 => payload.chunks(8).map(|b| F::from_f64(f64::read_le(b))).collect(),
        };
        store.add(name, Tensor::new(&shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok((store, meta))
}
