//! Parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "SACCKPT\0"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor, in name order:
//!   name length u32, name bytes (UTF-8)
//!   dtype tag   u8   (1 = f32)
//!   rank        u32, dims u32 x rank
//!   data        f32 x product(dims)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"SACCKPT\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ParameterSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(f32::DTYPE_TAG);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet<f32>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        if tag != f32::DTYPE_TAG {
            return Err(Error::Format(format!("{name}: unsupported dtype tag {tag}")));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(&dims, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

pub fn save(params: &ParameterSet<f32>, path: &Path) -> Result<String> {
    let bytes = to_bytes(params);
    std::fs::write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub fn load(path: &Path) -> Result<ParameterSet<f32>> {
    from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of raw bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
