//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FSNPCKPT" | version u32 | config_len u64 | config TOML | config sha256 (32)
//! step u64 | optimizer step u64 | rng seed (32) | rng stream u64 | rng word_pos u128
//! tensor_count u64 | tensors sorted by name:
//!     name_len u32 | name | dtype u8 (1 = f64) | ndim u32 | dims u64* | data f64*
//! sha256 of everything above (32)
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::model::FaceSnap;
use super::optim::AdamW;
use crate::attribute_mixer::MixerWeights;
use crate::diffusion::DenoiserWeights;
use crate::error::{Error, Result};
use crate::ffrnet::FFRNetWeights;
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSNPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub opt_step: u64,
    pub rng: RngState,
    /// Base, mixer and FFRNet parameters plus `adam.m.*` / `adam.v.*` moments.
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn capture(model: &FaceSnap, opt: &AdamW, rng: RngState, step: u64) -> Result<Self> {
        let mut tensors = model.base.params().clone();
        tensors.extend(model.trainable_params());
        for (name, t) in opt.first_moments().iter() {
            tensors.insert(format!("{ADAM_M}{name}"), t.clone());
        }
        for (name, t) in opt.second_moments().iter() {
            tensors.insert(format!("{ADAM_V}{name}"), t.clone());
        }
        Ok(Self { config: model.cfg.clone(), step, opt_step: opt.step_count(), rng, tensors })
    }

    fn split(&self) -> [ParamStore; 5] {
        let mut out: [ParamStore; 5] = Default::default();
        for (name, t) in self.tensors.iter() {
            let (slot, key) = if let Some(rest) = name.strip_prefix(ADAM_M) {
                (3, rest)
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                (4, rest)
            } else if name.starts_with("unet.") {
                (0, name.as_str())
            } else if name.starts_with("mixer.") {
                (1, name.as_str())
            } else {
                (2, name.as_str())
            };
            out[slot].insert(key, t.clone());
        }
        out
    }

    /// Rebuild the model only.
    pub fn into_model(self) -> Result<FaceSnap> {
        Ok(self.into_parts()?.0)
    }

    pub fn into_parts(self) -> Result<(FaceSnap, AdamW, RngState, u64)> {
        let [base, mixer, ffr, m, v] = self.split();
        let cfg = self.config;
        let base = DenoiserWeights::from_params(cfg.unet_config(), base)?;
        let mixer = MixerWeights::from_params(cfg.mixer_config(), mixer)?;
        let ffr = if cfg.ablation.use_ffrnet {
            Some(FFRNetWeights::from_params(cfg.unet_config(), cfg.model.control_size, ffr)?)
        } else if !ffr.is_empty() {
            return Err(Error::CorruptCheckpoint("FFRNet tensors present but use_ffrnet is off".into()));
        } else {
            None
        };
        let opt = AdamW::from_state(super::train::adamw_config(&cfg), self.opt_step, m, v);
        let model = FaceSnap::from_parts(cfg, base, mixer, ffr)?;
        Ok((model, opt, self.rng, self.step))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_toml()?;
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&Sha256::digest(text.as_bytes()));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parse and verify a whole file before returning anything.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("truncated file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| corrupt("config is not UTF-8"))?;
        let hash = r.take(32)?;
        if Sha256::digest(text.as_bytes()).as_slice() != hash {
            return Err(corrupt("config hash mismatch"));
        }
        let config = TrainConfig::from_toml(text)?;
        let step = r.u64()?;
        let opt_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u64()?;
        let mut tensors = ParamStore::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name"))?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(corrupt("tensor names not strictly sorted"));
            }
            if r.take(1)?[0] != DTYPE_F64 {
                return Err(corrupt("unsupported tensor dtype"));
            }
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(name.clone(), crate::autograd::tensor(&shape, data));
            last = Some(name);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { config, step, opt_step, rng: RngState { seed, stream, word_pos }, tensors })
    }

    /// Write to a sibling temporary file and rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::synthetic_dataset;
    use crate::pipeline::train::Trainer;

    fn trained() -> Trainer {
        let mut cfg = TrainConfig::default();
        cfg.train.batch_size = 2;
        cfg.train.lr = 1e-3;
        let data = synthetic_dataset(&cfg, 2, 0).unwrap();
        let mut tr = Trainer::new(cfg, &data).unwrap();
        tr.train(2).unwrap();
        tr
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tr = trained();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        tr.checkpoint().unwrap().save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, tr.checkpoint().unwrap());
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = trained().checkpoint().unwrap().encode().unwrap();
        for cut in [5, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(Error::Version { found: 2, expected: 1 })));
        let mut flipped = bytes;
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: [u64; 7] = rng.random();
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }
}
