//! Binary checkpoint of the trainable tensors.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "SECOSCKP" | version | S | d_model | r | d_text | tensor_count
//! per tensor: name_len | name (utf-8) | ndim | dims... | f32 data (LE, row-major)
//! ```
//!
//! Tensors appear in the order of [`AdapterParams::tensors`], so identical
//! parameters always serialize to identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::params::{AdapterBlock, AdapterParams, Projector};
use crate::error::{Result, SecosError};

pub const MAGIC: &[u8; 8] = b"SECOSCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub blocks: u32,
    pub d_model: u32,
    pub rank: u32,
    pub d_text: u32,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend(v.to_le_bytes());
}

fn dim(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| SecosError::Format(format!("{what} {v} does not fit in u32")))
}

pub fn to_bytes(params: &AdapterParams) -> Result<Vec<u8>> {
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 4);
    out.extend(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, dim(params.num_blocks(), "block count")?);
    put_u32(&mut out, dim(params.d_model(), "d_model")?);
    put_u32(&mut out, dim(params.rank(), "rank")?);
    put_u32(&mut out, dim(params.d_text(), "d_text")?);
    put_u32(&mut out, dim(tensors.len(), "tensor count")?);
    for t in tensors {
        put_u32(&mut out, dim(t.name.len(), "name length")?);
        out.extend(t.name.as_bytes());
        put_u32(&mut out, dim(t.shape.len(), "rank")?);
        for &d in &t.shape {
            put_u32(&mut out, dim(d, "dimension")?);
        }
        for &v in t.data {
            out.extend((v as f32).to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            SecosError::Format(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(SecosError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SecosError::Format(format!("unsupported checkpoint version {version}")));
    }
    Ok(CheckpointHeader { version, blocks: r.u32()?, d_model: r.u32()?, rank: r.u32()?, d_text: r.u32()? })
}

pub fn from_bytes(bytes: &[u8]) -> Result<AdapterParams> {
    let h = read_header(bytes)?;
    let mut r = Reader { buf: bytes, pos: 8 + 4 * 5 };
    let (s, d, rk, dt) = (h.blocks as usize, h.d_model as usize, h.rank as usize, h.d_text as usize);
    let mut params = AdapterParams {
        blocks: (0..s)
            .map(|_| AdapterBlock {
                ln_gain: Array1::zeros(d),
                ln_bias: Array1::zeros(d),
                down_weight: Array2::zeros((rk, d)),
                down_bias: Array1::zeros(rk),
                up_weight: Array2::zeros((d, rk)),
                up_bias: Array1::zeros(d),
                scale: Array1::zeros(1),
            })
            .collect(),
        projector: Projector { weight: Array2::zeros((dt, d)), bias: Array1::zeros(dt) },
    };
    let count = r.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(SecosError::Format(format!("expected {} tensors, found {count}", slots.len())));
    }
    for slot in slots.iter_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| SecosError::Format("tensor name is not utf-8".into()))?;
        if name != slot.name {
            return Err(SecosError::Format(format!("expected tensor `{}`, found `{name}`", slot.name)));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape {
            return Err(SecosError::Format(format!("tensor `{name}` has shape {shape:?}, expected {:?}", slot.shape)));
        }
        for v in slot.data.iter_mut() {
            *v = f64::from(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(SecosError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(params: &AdapterParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AdapterParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter_net::params::AdapterInit;

    fn params() -> AdapterParams {
        let mut p = AdapterParams::init(2, 6, AdapterInit { rank: 3, scale: 0.5 }, Projector::random_orthogonal(4, 6, 1), 2).unwrap();
        p.blocks[1].up_weight.fill(0.25);
        p
    }

    #[test]
    fn header_fields() {
        let bytes = to_bytes(&params()).unwrap();
        let h = read_header(&bytes).unwrap();
        assert_eq!(h, CheckpointHeader { version: 1, blocks: 2, d_model: 6, rank: 3, d_text: 4 });
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let bytes = to_bytes(&params()).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert!(back.max_abs_diff(&params()) < 1e-6);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&params()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
