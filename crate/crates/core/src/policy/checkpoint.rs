//! Binary checkpoint: `"RDXC"`, version `u32`, the policy config as a
//! length-prefixed JSON echo, then one record per parameter:
//! name (`u16` length + UTF-8), rank `u8`, dims `u64` each, values `f64`.
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Policy, PolicyConfig, PolicyError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDXC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(policy: &Policy) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let echo = serde_json::to_vec(policy.config()).expect("config serializes");
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(&echo);
    out.extend_from_slice(&(policy.params().len() as u32).to_le_bytes());
    for (name, t) in policy.params() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
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
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PolicyError::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, PolicyError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PolicyError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint. With `expected`, the echoed config must match it.
pub fn parse_checkpoint(bytes: &[u8], expected: Option<&PolicyConfig>) -> Result<Policy, PolicyError> {
    let err = |m: String| PolicyError::Checkpoint(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let echo_len = r.u32()? as usize;
    let config: PolicyConfig = serde_json::from_slice(r.take(echo_len)?)
        .map_err(|e| err(format!("config echo: {e}")))?;
    if let Some(want) = expected {
        if want != &config {
            return Err(err("checkpoint was written for a different policy config".into()));
        }
    }
    let count = r.u32()?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| err("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| err(format!("{name} is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        if params.insert(name.clone(), t).is_some() {
            return Err(err(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(err("trailing bytes after parameters".into()));
    }
    Policy::from_parts(config, params)
}

pub fn save_checkpoint(policy: &Policy, path: impl AsRef<Path>) -> Result<(), PolicyError> {
    fs::write(path, checkpoint_bytes(policy))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&PolicyConfig>) -> Result<Policy, PolicyError> {
    parse_checkpoint(&fs::read(path)?, expected)
}
