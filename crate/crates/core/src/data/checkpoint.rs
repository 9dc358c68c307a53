//! Binary checkpoints.
//!
//! Layout, little-endian: `"MGFI"`, `u32` version, `u32` length + model
//! config JSON, `u32` tensor count, then per tensor `u32` name length +
//! name, `u32` ndim, `u32 × ndim` dims and the raw `f32` payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ModelConfig, NetworkParams};
use crate::params::Module;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MGFI";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &NetworkParams<f32>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&params.config)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let tensors = params.named_tensors();
    put_u32(&mut out, tensors.len())?;
    for (name, t, _) in &tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        put_u32(&mut out, dims.len())?;
        for d in dims {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut table = HashMap::with_capacity(count);
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Inventory("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        if ndim != 4 {
            return Err(Error::Inventory(format!("{name}: expected 4 dims, found {ndim}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = r.take(shape.numel().checked_mul(4).ok_or(Error::Truncated(bytes.len()))?)?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        order.push(name.clone());
        table.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Inventory(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut params = NetworkParams::init(&config)?;
    let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    if expected != order {
        let missing: Vec<_> = expected.iter().filter(|n| !table.contains_key(*n)).collect();
        let extra: Vec<_> = order.iter().filter(|n| !expected.contains(n)).collect();
        return Err(Error::Inventory(format!("missing {missing:?}, unexpected {extra:?}")));
    }
    let mut err = None;
    params.visit("", &mut |name, t, _| {
        let stored = &table[name];
        if stored.shape() != t.shape() {
            err.get_or_insert(Error::Inventory(format!("{name}: stored {} vs model {}", stored.shape(), t.shape())));
        } else {
            *t = stored.clone();
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(params),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams<f32>> {
    decode_checkpoint(&fs::read(path)?)
}
