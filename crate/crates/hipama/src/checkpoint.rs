//! Versioned binary checkpoints: a magic string, the model configuration
//! as JSON, then a flat list of named parameters with shapes and
//! little-endian f64 payloads. Byte layout is fixed so identical runs
//! produce bitwise-identical files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Hipama, ModelConfig};
use crate::optim::Parameter;

pub const MAGIC: &[u8] = b"HIPAMA-CKPT-1\n";

/// One stored parameter: name, shape, values.
pub type Entry = (String, Vec<usize>, Vec<f64>);

pub fn checkpoint_bytes(config: &ModelConfig, params: &[Parameter]) -> Vec<u8> {
    let config_json = serde_json::to_vec(config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &[Parameter],
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(config, params))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<Entry>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic: not a HIPAMA-CKPT-1 file".into(),
        ));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;
    let n_params = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok((config, entries))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, Vec<Entry>)> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Rebuild a model from a checkpoint file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Hipama> {
    let (config, entries) = load_checkpoint(path)?;
    let model = Hipama::new(config)?;
    model.load_state(&entries)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn round_trip_preserves_config_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig {
            width: 8,
            heads: 2,
            seed: 5,
            ..ModelConfig::default()
        };
        let model = Hipama::new(config.clone()).unwrap();
        save_checkpoint(&path, &config, &model.named_params()).unwrap();
        let restored = load_model(&path).unwrap();
        assert_eq!(restored.config, config);
        for (a, b) in model.named_params().iter().zip(restored.named_params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.to_vec(), b.tensor.to_vec());
        }
    }

    #[test]
    fn restored_model_reproduces_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig {
            width: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let model = Hipama::new(config.clone()).unwrap();
        // Nudge parameters away from init so restoration is observable.
        for p in model.named_params() {
            p.tensor.with_data_mut(|d| d.iter_mut().for_each(|v| *v += 0.01));
        }
        save_checkpoint(&path, &config, &model.named_params()).unwrap();
        let restored = load_model(&path).unwrap();
        let (samples, _) = crate::data::generate_synthetic(3, 8, 0.1);
        let batch = crate::data::Batch::from_samples(&samples, 42, 50, None).unwrap();
        let a = model.forward(&batch, Mode::Eval);
        let b = restored.forward(&batch, Mode::Eval);
        let (av, bv) = (a.phoneme_scores.to_vec(), b.phoneme_scores.to_vec());
        assert!(av.iter().zip(&bv).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = parse_checkpoint(b"NOT-A-CHECKPOINT").unwrap_err();
        assert!(err.to_string().contains("magic"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncation_is_detected() {
        let config = ModelConfig::default();
        let model = Hipama::new(config.clone()).unwrap();
        let bytes = checkpoint_bytes(&config, &model.named_params());
        let err = parse_checkpoint(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn serialization_is_deterministic() {
        let config = ModelConfig::default();
        let m1 = Hipama::new(config.clone()).unwrap();
        let m2 = Hipama::new(config.clone()).unwrap();
        assert_eq!(
            checkpoint_bytes(&config, &m1.named_params()),
            checkpoint_bytes(&config, &m2.named_params())
        );
    }
}
