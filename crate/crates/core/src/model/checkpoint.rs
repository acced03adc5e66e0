//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "DPANCKPT"
//! version      u32      currently 1
//! config_len   u32      byte length of the config text
//! config       utf-8    `key = value` lines (model.* keys plus extra metadata)
//! vocab_len    u32
//! vocab        utf-8    vocabulary manifest text
//! n_params     u32
//! per parameter:
//!   name_len   u32
//!   name       utf-8
//!   rank       u32
//!   dims       rank × u64
//!   data       product(dims) × f64
//! ```

use std::path::Path;

use super::{Model, ModelConfig};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::features::VocabManifest;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"DPANCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_text(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes `model`; `extra` lines (e.g. training metadata) are stored
/// alongside the model config and ignored on load.
pub fn to_bytes(model: &Model, extra: &KvConfig) -> Result<Vec<u8>> {
    let mut cfg = KvConfig::new();
    for key in model.config().to_kv().keys() {
        cfg.set(format!("model.{key}"), model.config().to_kv().get_str(key).unwrap_or_default());
    }
    for key in extra.keys() {
        if !key.starts_with("model.") {
            cfg.set(key, extra.get_str(key).unwrap_or_default());
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_text(&mut out, &cfg.to_text())?;
    put_text(&mut out, &model.manifest().to_text())?;
    put_u32(&mut out, model.store().len())?;
    for (_, p) in model.store().iter() {
        put_text(&mut out, &p.name)?;
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
    }
}

/// Rebuilds the model and its stored config text.
pub fn from_bytes(buf: &[u8]) -> Result<(Model, KvConfig)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = KvConfig::parse(r.text()?, Path::new("<checkpoint config>"))?;
    let manifest = VocabManifest::parse(r.text()?, Path::new("<checkpoint vocab>"))?;
    let config = ModelConfig::from_kv(&cfg.section("model"))?;
    let mut model = Model::new(config, manifest)?;
    let n = r.u32()?;
    if n != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n} tensors, the configured model has {}",
            model.store().len()
        )));
    }
    for _ in 0..n {
        let name = r.text()?.to_string();
        let rank = r.u32()?;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .store()
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        if model.store().value(id).shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {dims:?}, expected {:?}",
                model.store().value(id).shape()
            )));
        }
        *model.store_mut().value_mut(id) = Tensor::new(dims, data)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((model, cfg))
}

pub fn save(model: &Model, extra: &KvConfig, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, extra)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, KvConfig)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
