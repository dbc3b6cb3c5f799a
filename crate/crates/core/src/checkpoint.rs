//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes "MMT5"
//! version u32 (currently 1)
//! config  u32 length + canonical run-config text (UTF-8)
//! count   u32 number of parameters
//! per parameter:
//!   name  u16 length + UTF-8
//!   group u8 length + UTF-8 group label
//!   lang  i32 language index, -1 for shared parameters
//!   shape u8 rank + u32 per dimension
//!   data  f64 little-endian, row-major
//! digest  32-byte SHA-256 over everything above
//! ```
//!
//! The embedded config makes checkpoints self-describing: loading rebuilds
//! the model from it and validates every name, label, language, and shape,
//! so a dense checkpoint refuses to load as modular and vice versa.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::params::ParamGroup;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MMT5";
pub const VERSION: u32 = 1;

pub fn serialize(model: &Model, config: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store().len() as u32).to_le_bytes());
    for (_, p) in model.store().iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let label = p.group.label();
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
        let lang: i32 = p.lang.map(|l| l as i32).unwrap_or(-1);
        out.extend_from_slice(&lang.to_le_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save(path: &Path, model: &Model, config: &RunConfig) -> Result<()> {
    std::fs::write(path, serialize(model, config))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 string field".into()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<(RunConfig, Model)> {
    if bytes.len() < 32 + 8 {
        return Err(Error::Checkpoint("file too small".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(Error::Checkpoint("integrity checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = r.str(config_len)?.to_string();
    let config = RunConfig::parse(&config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

    // seed is irrelevant here: every value is overwritten below
    let mut model = Model::new(config.model_config(), config.variant, 0)?;
    let count = r.u32()? as usize;
    if count != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match the {} variant built from \
             the embedded config ({} expected)",
            config.variant.label(),
            model.store().len()
        )));
    }
    for i in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.str(name_len)?.to_string();
        let label_len = r.u8()? as usize;
        let label = r.str(label_len)?.to_string();
        let lang = r.i32()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;

        let id = crate::params::ParamId(i);
        let param = model.store().get(id);
        if param.name != name {
            return Err(Error::Checkpoint(format!(
                "parameter {i}: name {name:?} does not match expected {:?} \
                 (incompatible variant or architecture)",
                param.name
            )));
        }
        let group = ParamGroup::from_label(&label)
            .ok_or_else(|| Error::Checkpoint(format!("unknown group label {label:?}")))?;
        if group != param.group {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: group {label} does not match expected {}",
                param.group.label()
            )));
        }
        let expect_lang = param.lang.map(|l| l as i32).unwrap_or(-1);
        if lang != expect_lang {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: language {lang} does not match expected {expect_lang}"
            )));
        }
        if shape != param.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {shape:?} does not match expected {:?}",
                param.value.shape()
            )));
        }
        let data = model.store_mut().get_mut(id).value.data_mut();
        for (j, chunk) in raw.chunks_exact(8).enumerate() {
            data[j] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((config, model))
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    deserialize(&bytes)
}

/// Loads a checkpoint and insists on its variant. A checkpoint saved by the
/// dense variant refuses to load as modular and vice versa.
pub fn load_expecting(path: &Path, variant: Variant) -> Result<(RunConfig, Model)> {
    let (config, model) = load(path)?;
    if model.variant() != variant {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} was saved by the {} variant; refusing to load as {}",
            path.display(),
            model.variant().label(),
            variant.label()
        )));
    }
    Ok((config, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::preset();
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.d_bottleneck = 4;
        cfg.n_languages = 2;
        cfg.v_base = 8;
        cfg.max_len = 16;
        cfg.source_languages = vec![0];
        cfg.eval_languages = vec![0, 1];
        cfg.related_to = 1;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small_config();
        let model = Model::new(cfg.model_config(), cfg.variant, 42).unwrap();
        let bytes = serialize(&model, &cfg);
        let (cfg2, model2) = deserialize(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        for ((_, a), (_, b)) in model.store().iter().zip(model2.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            assert_eq!(a.lang, b.lang);
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{}", a.name);
        }
        // serialization is stable
        assert_eq!(serialize(&model2, &cfg2), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = small_config();
        let model = Model::new(cfg.model_config(), cfg.variant, 1).unwrap();
        let mut bytes = serialize(&model, &cfg);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = deserialize(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn dense_checkpoint_refuses_to_load_as_modular() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.mmt5");
        let mut cfg = small_config();
        cfg.variant = Variant::Dense;
        let model = Model::new(cfg.model_config(), Variant::Dense, 1).unwrap();
        save(&path, &model, &cfg).unwrap();
        let err = load_expecting(&path, Variant::Modular).unwrap_err();
        assert!(err.to_string().contains("refusing"), "{err}");
        assert!(load_expecting(&path, Variant::Dense).is_ok());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = deserialize(&[0u8; 64]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
