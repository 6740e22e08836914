//! Binary parameter checkpoints (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "MTSWCKPT"
//! version u32      1
//! digest  u64      FNV-1a 64 of the config text below
//! config  u32 length + UTF-8 model config in key = value form
//! count   u32      number of tensor records
//! record  u32 name length + name, u32 rank, rank × u32 dims, f32 data
//! ```

use std::path::Path;

use super::{build_model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::params::Module;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTSWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let text = params.config.to_text();
    let named = params.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a64(text.as_bytes()).to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at offset {} reading {what}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format(format!("checkpoint {what} at offset {at} is not UTF-8")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic at offset 0".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let digest = r.u64("config digest")?;
    let text = r.string("config")?;
    if fnv1a64(text.as_bytes()) != digest {
        return Err(Error::Format("checkpoint config digest mismatch".into()));
    }
    let config = ModelConfig::from_text(&text)?;
    let count = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        named.push((name, Tensor::<f32>::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let mut params = build_model::<f32>(&config, &mut Rng::new(0))?;
    params.load_named(&named)?;
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
