//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "REIDCKPT"
//! version      u32
//! config_len   u32, then config_len bytes of `key = value` text
//! count        u32
//! count × record:
//!   name_len   u16, then name bytes (UTF-8)
//!   rank       u8, then rank × u32 extents
//!   values     product(extents) × f32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{EmbeddingModel, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"REIDCKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(model: &EmbeddingModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = kv::render(&model.config().to_pairs());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = model.state_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
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
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointTruncated(format!(
                "needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Raw decoded checkpoint: the embedded config and named tensors.
pub struct Decoded {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::CheckpointTruncated("file shorter than header".into()));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::CheckpointConfig("config is not UTF-8".into()))?;
    let entries = kv::parse(cfg_text, Path::new("<checkpoint>"))?;
    let config = ModelConfig::from_pairs(entries.iter().map(|e| (e.key.as_str(), e.value.as_str())))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| Error::CheckpointConfig("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|_| Error::CheckpointConfig(format!("tensor `{name}` has an empty extent")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointConfig(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(Decoded { config, tensors })
}

pub fn save<T: Scalar>(model: &EmbeddingModel<T>, path: &Path) -> Result<()> {
    kv::write_atomic(path, &encode(model))
}

/// Loads a checkpoint using the config embedded in it.
pub fn load<T: Scalar>(path: &Path) -> Result<EmbeddingModel<T>> {
    let bytes = std::fs::read(path)?;
    let decoded = decode(&bytes)?;
    let cfg = decoded.config.clone();
    restore(decoded, &cfg)
}

/// Loads a checkpoint into a model built from `cfg`. Fails if the presets
/// differ or any stored tensor's shape disagrees with `cfg`.
pub fn load_with_config<T: Scalar>(path: &Path, cfg: &ModelConfig) -> Result<EmbeddingModel<T>> {
    let bytes = std::fs::read(path)?;
    restore(decode(&bytes)?, cfg)
}

fn restore<T: Scalar>(decoded: Decoded, cfg: &ModelConfig) -> Result<EmbeddingModel<T>> {
    if decoded.config.preset != cfg.preset {
        return Err(Error::CheckpointConfig(format!(
            "checkpoint preset `{}` cannot load under `{}`",
            decoded.config.preset.name(),
            cfg.preset.name()
        )));
    }
    let mut model = EmbeddingModel::<T>::build(cfg, 0)?;
    let expected: Vec<String> = model.state_tensors().into_iter().map(|(n, _)| n).collect();
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in decoded.tensors {
        model.set_state_tensor(&name, t.cast())?;
        seen.insert(name);
    }
    if let Some(missing) = expected.iter().find(|n| !seen.contains(*n)) {
        return Err(Error::CheckpointConfig(format!("checkpoint lacks tensor `{missing}`")));
    }
    Ok(model)
}
