//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `OODLCKPT` |
//! | 4 | format version (u32, currently 1) |
//! | 5 × 8 | n_layers, d_model, n_heads, d_ff, max_seq_len (u64) |
//! | 2 × 8 | ln_eps, init_std (f64) |
//! | 8 | seed (u64) |
//! | 8 | buffer count (u64) |
//! | per buffer | element count (u64) then that many f64 values |
//! | 32 | SHA-256 of every preceding byte |
//!
//! Buffers follow [`ModelParams::buffers`] order.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"OODLCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(128 + 8 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.max_seq_len] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.ln_eps.to_le_bytes());
    out.extend_from_slice(&c.init_std.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    let bufs = params.buffers();
    out.extend_from_slice(&(bufs.len() as u64).to_le_bytes());
    for b in bufs {
        out.extend_from_slice(&(b.numel() as u64).to_le_bytes());
        for v in b.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config = ModelConfig {
        n_layers: r.u64()? as usize,
        d_model: r.u64()? as usize,
        n_heads: r.u64()? as usize,
        d_ff: r.u64()? as usize,
        max_seq_len: r.u64()? as usize,
        ln_eps: r.f64()?,
        init_std: r.f64()?,
        seed: r.u64()?,
    };
    let mut params = ModelParams::init(&config)?;
    let n = r.u64()? as usize;
    let mut bufs = params.buffers_mut();
    if n != bufs.len() {
        return Err(Error::Checkpoint(format!("expected {} buffers, found {n}", bufs.len())));
    }
    for b in bufs.iter_mut() {
        let len = r.u64()? as usize;
        if len != b.numel() {
            return Err(Error::Checkpoint(format!("buffer of {len} values where {} expected", b.numel())));
        }
        for v in b.data_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&std::fs::read(path)?)
}
