//! Little-endian checkpoint format:
//!
//! ```text
//! "HFTC" | version u8 | config length u32 | config text (key = value lines)
//! then per parameter, in construction order:
//! name length u32 | name bytes | rank u8 | extents u64 × rank | f32 × numel
//! ```

use std::path::Path;

use indexmap::IndexMap;

use super::config::ModelConfig;
use super::params::{param_specs, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HFTC";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    let text = cfg.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, path)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.saturating_mul(4), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u8) -> Result<()> {
        let found = self.u8("version")?;
        if found != expected {
            return Err(Error::Version {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32("config length")? as usize;
    let text = match std::str::from_utf8(r.take(len, "config")?) {
        Ok(t) => t,
        Err(_) => return r.fail("config block is not UTF-8"),
    };
    let cfg = ModelConfig::from_text(text)?;

    let mut tensors = IndexMap::new();
    for spec in param_specs(&cfg)? {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "name")?).into_owned();
        if name != spec.name {
            return r.fail(format!(
                "expected parameter `{}`, found `{name}`",
                spec.name
            ));
        }
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return r.fail(format!(
                "`{name}` has shape {shape:?}, config implies {:?}",
                spec.shape
            ));
        }
        let data = r.f32s(shape.iter().product(), &name)?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if !r.at_end() {
        return r.fail("trailing bytes after last parameter");
    }
    Ok((cfg, ModelParams::from_tensors(tensors)))
}
