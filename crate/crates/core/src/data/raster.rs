use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DLIM";
const HEADER: usize = 16;

/// Uncompressed 8-bit raster: `"DLIM"`, `u32` height, width, channels
/// (little-endian), then `c·h·w` bytes, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims("raster", &[channels, height, width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Corruption {
                path: path.into(),
                offset: bytes.len() as u64,
                reason: "raster header truncated".into(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format {
                path: path.into(),
                reason: "missing DLIM magic".into(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (h, w, c) = (word(0), word(1), word(2));
        let need = h * w * c;
        if bytes.len() - HEADER != need {
            return Err(Error::Corruption {
                path: path.into(),
                offset: bytes.len() as u64,
                reason: format!("expected {need} payload bytes, found {}", bytes.len() - HEADER),
            });
        }
        Raster::new(h, w, c, bytes[HEADER..].to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
