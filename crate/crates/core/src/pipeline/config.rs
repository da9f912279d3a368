//! Training and inference configuration, read from TOML with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribute_mixer::{FeatureMode, MixerConfig};
use crate::diffusion::{MaskNorm, UNetConfig};
use crate::error::{Error, Result};

/// Where the FFRNet control image comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    /// Black control image.
    None,
    /// Landmarks of the driving face as-is.
    Drive,
    /// Source shape under the driving pose and expression.
    #[default]
    Predictor,
}

impl ControlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlMode::None => "none",
            ControlMode::Drive => "drive",
            ControlMode::Predictor => "predictor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Token width of the mixer output and of every context sequence.
    pub d: usize,
    pub d_id: usize,
    pub d_clip: usize,
    pub mixer_layers: usize,
    pub mixer_heads: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub unet_channels: Vec<usize>,
    pub ctx_tokens: usize,
    pub control_size: usize,
    pub k_shape: usize,
    pub k_expr: usize,
    /// Seed of the frozen base denoiser, the stub encoders and the face basis.
    pub base_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 64,
            d_id: 512,
            d_clip: 64,
            mixer_layers: 2,
            mixer_heads: 1,
            latent_channels: 4,
            latent_size: 16,
            unet_channels: vec![16, 32, 32],
            ctx_tokens: 4,
            control_size: 64,
            k_shape: 8,
            k_expr: 6,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub timesteps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lambda_id: f64,
    pub cfg_dropout_p: f64,
    pub lightning_steps: usize,
    pub id_loss_every_n: u64,
    pub mask_norm: MaskNorm,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            timesteps: 100,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 8,
            steps: 200,
            lambda_id: 0.5,
            cfg_dropout_p: 0.1,
            lightning_steps: 4,
            id_loss_every_n: 1,
            mask_norm: MaskNorm::AllElements,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub guidance_scale: f64,
    pub sample_steps: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { guidance_scale: 2.0, sample_steps: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub feature_mode: FeatureMode,
    pub use_ffrnet: bool,
    pub control_mode: ControlMode,
    /// Also feed `f_mix` to the base denoiser's cross-attention, appended to
    /// the text tokens. Always on when `use_ffrnet` is off.
    pub base_id_attention: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            feature_mode: FeatureMode::Mixer,
            use_ffrnet: true,
            control_mode: ControlMode::Predictor,
            base_id_attention: false,
        }
    }
}

impl AblationSection {
    pub fn base_sees_f_mix(&self) -> bool {
        self.base_id_attention || !self.use_ffrnet
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `manifest.toml`; empty means a synthetic set.
    pub root: String,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
    pub max_yaw: f64,
    pub max_pitch: f64,
    pub max_roll: f64,
    pub max_shift: f64,
    pub scale_range: [f64; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: String::new(),
            synthetic_size: 8,
            synthetic_seed: 0,
            max_yaw: 0.4,
            max_pitch: 0.25,
            max_roll: 0.15,
            max_shift: 0.05,
            scale_range: [0.9, 1.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub ablation: AblationSection,
    pub data: DataSection,
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{what} must be positive")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// sha256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        positive("model.d", m.d)?;
        positive("model.d_id", m.d_id)?;
        positive("model.d_clip", m.d_clip)?;
        positive("model.ctx_tokens", m.ctx_tokens)?;
        positive("train.batch_size", t.batch_size)?;
        positive("train.lightning_steps", t.lightning_steps)?;
        positive("infer.sample_steps", self.infer.sample_steps)?;
        if t.id_loss_every_n == 0 {
            return Err(Error::Config("train.id_loss_every_n must be positive".into()));
        }
        if t.lightning_steps > t.timesteps || self.infer.sample_steps > t.timesteps {
            return Err(Error::Config("sampler steps exceed train.timesteps".into()));
        }
        let finite_pos = [("train.lr", t.lr), ("train.adam_eps", t.adam_eps)];
        for (name, v) in finite_pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(t.weight_decay >= 0.0 && t.lambda_id >= 0.0 && self.infer.guidance_scale >= 0.0) {
            return Err(Error::Config("weight_decay, lambda_id and guidance_scale must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&t.cfg_dropout_p) {
            return Err(Error::Config(format!("train.cfg_dropout_p {} outside [0, 1]", t.cfg_dropout_p)));
        }
        let d = &self.data;
        if !(d.scale_range[0] > 0.0 && d.scale_range[0] <= d.scale_range[1]) {
            return Err(Error::Config("data.scale_range must be positive and ordered".into()));
        }
        self.mixer_config().validate()?;
        self.unet_config().validate()?;
        crate::diffusion::NoiseSchedule::linear(t.timesteps)?;
        if !m.control_size.is_multiple_of(m.latent_size) || !(m.control_size / m.latent_size).is_power_of_two() {
            return Err(Error::Config("model.control_size must be latent_size times a power of two".into()));
        }
        Ok(())
    }

    pub fn mixer_config(&self) -> MixerConfig {
        let m = &self.model;
        MixerConfig {
            d_id: m.d_id,
            d_clip: m.d_clip,
            d: m.d,
            layers: m.mixer_layers,
            heads: m.mixer_heads,
            feature_mode: self.ablation.feature_mode,
            ..MixerConfig::default()
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        let m = &self.model;
        UNetConfig {
            in_channels: m.latent_channels,
            channels: m.unet_channels.clone(),
            latent_size: m.latent_size,
            ctx_dim: m.d,
            ctx_tokens: m.ctx_tokens,
            ..UNetConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.train.lambda_id, 0.5);
        assert_eq!(c.train.cfg_dropout_p, 0.1);
        assert_eq!(c.infer.guidance_scale, 2.0);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("[train]\nlr = 1e-4\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("[nonsense]\n").is_err());
        let partial = TrainConfig::from_toml("[ablation]\nfeature_mode = \"id\"\ncontrol_mode = \"none\"\n").unwrap();
        assert_eq!(partial.ablation.feature_mode, FeatureMode::Id);
        assert_eq!(partial.ablation.control_mode, ControlMode::None);
        assert_eq!(partial.train.lambda_id, 0.5);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = TrainConfig::default();
        c.train.cfg_dropout_p = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.model.control_size = 48;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.train.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
