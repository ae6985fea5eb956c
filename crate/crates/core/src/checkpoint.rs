//! Versioned binary container for model weights and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CGDCKPT\0"
//! version      u32
//! iteration    u64
//! adam_step    u64
//! config_hash  u64
//! config_len   u32, then config_len bytes of UTF-8 config text
//! entries      u32
//! per entry:   name_len u32, name bytes, rank u32, rank × u64 dims, f32 payload
//! ```
//!
//! Entry names are prefixed `param/`, `adam_m/` or `adam_v/`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::optim::AdamW;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CGDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub adam_step: u64,
    pub config_hash: u64,
    pub config_text: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of a model and optional optimizer.
    pub fn capture(
        model: &Denoiser<f32>,
        opt: Option<&AdamW<f32>>,
        iteration: u64,
        config_text: String,
        config_hash: u64,
    ) -> Self {
        let mut entries: Vec<(String, Tensor<f32>)> = model
            .params()
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t.clone()))
            .collect();
        let mut adam_step = 0;
        if let Some(o) = opt {
            adam_step = o.steps_taken();
            let (m, v) = o.moments();
            for (prefix, ts) in [("adam_m", m), ("adam_v", v)] {
                for (n, t) in model.params().names().iter().zip(ts) {
                    entries.push((format!("{prefix}/{n}"), t.clone()));
                }
            }
        }
        Self {
            iteration,
            adam_step,
            config_hash,
            config_text,
            entries,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_optimizer(&self) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with("adam_m/"))
    }

    fn lookup(&self, prefix: &str, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let key = format!("{prefix}/{name}");
        let t = self
            .get(&key)
            .ok_or_else(|| Error::format(key.clone(), "missing from checkpoint"))?;
        if t.shape() != shape {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t.clone())
    }

    /// Copies the stored weights into `model`, checking every name and shape first.
    pub fn apply(&self, model: &mut Denoiser<f32>) -> Result<()> {
        let loaded = model
            .params()
            .iter()
            .map(|(n, t)| self.lookup("param", n, t.shape()))
            .collect::<Result<Vec<_>>>()?;
        model.params_mut().tensors_mut().clone_from_slice(&loaded);
        Ok(())
    }

    pub fn apply_optimizer(&self, model: &Denoiser<f32>, opt: &mut AdamW<f32>) -> Result<()> {
        let read = |prefix: &str| {
            model
                .params()
                .iter()
                .map(|(n, t)| self.lookup(prefix, n, t.shape()))
                .collect::<Result<Vec<_>>>()
        };
        opt.restore(self.adam_step, read("adam_m")?, read("adam_v")?)
    }

    /// Logs a warning when the stored config hash differs from `expected`.
    pub fn check_hash(&self, expected: u64) -> bool {
        let ok = self.config_hash == expected;
        if !ok {
            log::warn!(
                "checkpoint config hash {:016x} differs from current config {:016x}",
                self.config_hash,
                expected
            );
        }
        ok
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&self.adam_step.to_le_bytes());
        b.extend_from_slice(&self.config_hash.to_le_bytes());
        b.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config_text.as_bytes());
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let iteration = r.u64("iteration")?;
        let adam_step = r.u64("adam_step")?;
        let config_hash = r.u64("config_hash")?;
        let n = r.u32("config_len")? as usize;
        let config_text = String::from_utf8(r.take(n, "config")?.to_vec())
            .map_err(|e| Error::format("config", e.to_string()))?;
        let count = r.u32("entries")?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32("name_len")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|e| Error::format("name", e.to_string()))?;
            let rank = r.u32(&name)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(name.clone(), "shape overflows"))?;
            let payload = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(name.clone(), e.to_string()))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailer", format!("{} unexpected bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            iteration,
            adam_step,
            config_hash,
            config_text,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(field, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::InitMode;

    fn tiny(c_z: usize) -> ModelConfig {
        ModelConfig {
            c_base: 4,
            blocks_per_extractor: 1,
            attention_heads: 1,
            c_z,
            d_k: 4,
            num_k: 2,
            dpe_width: 4,
            decoder_width: 4,
            kernel_hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let m = Denoiser::<f32>::new(tiny(2), InitMode::Random, 0).unwrap();
        let mut bytes = Checkpoint::capture(&m, None, 0, String::new(), 0).to_bytes();
        bytes[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 2, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file_rejected() {
        let m = Denoiser::<f32>::new(tiny(2), InitMode::Random, 0).unwrap();
        let bytes = Checkpoint::capture(&m, None, 0, "x".into(), 0).to_bytes();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn mismatched_architecture_names_parameter() {
        let m = Denoiser::<f32>::new(tiny(2), InitMode::Random, 0).unwrap();
        let ck = Checkpoint::capture(&m, None, 0, String::new(), 0);
        let mut other = Denoiser::<f32>::new(tiny(3), InitMode::Random, 0).unwrap();
        match ck.apply(&mut other) {
            Err(Error::ParamShape { name, .. }) => assert!(name.contains("x.head") || name.contains("prior_x") || name.contains("decoder")),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn hash_check() {
        let m = Denoiser::<f32>::new(tiny(2), InitMode::Random, 0).unwrap();
        let ck = Checkpoint::capture(&m, None, 0, String::new(), 42);
        assert!(ck.check_hash(42));
        assert!(!ck.check_hash(43));
    }
}
