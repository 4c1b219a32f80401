//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DLVT" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name: utf-8 | dtype: u8 (0 = f32) |
//!             rank: u32 | dims: rank × u64 | payload: prod(dims) × f32 )
//! ```
//!
//! Entries are written in name order. Loading parses the whole file before
//! returning anything.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DLVT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode(tensors: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
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
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                path: self.path.into(),
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, at: usize, reason: String) -> Error {
        Error::Corruption {
            path: self.path.into(),
            offset: at as u64,
            reason,
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            path: path.into(),
            reason: "missing DLVT magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("unsupported checkpoint version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.corrupt(at, "tensor name is not utf-8".into()))?
            .to_owned();
        let dt_at = r.pos;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(r.corrupt(dt_at, format!("unknown dtype tag {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|l| l.checked_mul(4).is_some())
            .ok_or_else(|| r.corrupt(dt_at, "tensor size overflows".into()))?;
        let payload = r.take(len * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data)?;
        if map.insert(name.clone(), t).is_some() {
            return Err(r.corrupt(at, format!("duplicate tensor name {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(r.pos, "trailing bytes after last tensor".into()));
    }
    Ok(map)
}

pub fn save_checkpoint(path: &Path, tensors: &TensorMap) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
