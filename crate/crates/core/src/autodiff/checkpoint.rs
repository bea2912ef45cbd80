//! Binary parameter container.
//!
//! Layout, all integers little-endian: magic `DS4C`, `u32` version, `u32`
//! record count, then per record a `u32` name length, the UTF-8 name, a `u32`
//! rank, `rank` dimensions as `u64`, and the `f64` values. Optimizer state is
//! stored in the same container with `m.`/`v.` prefixed names and a step
//! record.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DS4C";
const VERSION: u32 = 1;
const STEP_KEY: &str = "adam.step";

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DS4C container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_params(&bytes)
}

pub fn save_adam(path: &Path, state: &AdamState) -> Result<()> {
    let mut set = ParamSet::new();
    set.insert(STEP_KEY, Tensor::scalar(state.step as f64));
    for (prefix, map) in [("m.", &state.m), ("v.", &state.v)] {
        for (name, vals) in map {
            set.insert(format!("{prefix}{name}"), Tensor::vector(vals.clone()));
        }
    }
    save_params(path, &set)
}

pub fn load_adam(path: &Path) -> Result<AdamState> {
    let set = load_params(path)?;
    let mut state = AdamState::new();
    for (name, t) in set.iter() {
        if name == STEP_KEY {
            state.step = t.item()? as u64;
        } else if let Some(n) = name.strip_prefix("m.") {
            state.m.insert(n.to_string(), t.data().to_vec());
        } else if let Some(n) = name.strip_prefix("v.") {
            state.v.insert(n.to_string(), t.data().to_vec());
        } else {
            return Err(Error::Checkpoint(format!("unexpected optimizer record `{name}`")));
        }
    }
    Ok(state)
}
