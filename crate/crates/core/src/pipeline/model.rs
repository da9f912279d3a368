//! The assembled model: frozen base denoiser and encoders, trainable mixer
//! and FFRNet, plus the per-sample conditioning they consume.

use ndarray::Axis;

use super::config::{ControlMode, TrainConfig};
use super::data::{face_basis, Sample};
use crate::attribute_mixer::MixerWeights;
use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::{denoise_var, DenoiserWeights, EpsPredictor, NoiseSchedule};
use crate::encoders::{
    crop_resample_var, BBox, ClipEncoder, EncoderKind, EncoderSpec, FaceEncoder, FaceMask, CANONICAL_CROP,
};
use crate::error::Result;
use crate::ffrnet::{ffrnet_forward_var, FFRNetWeights};
use crate::landmark3d::{
    extract_landmarks, predict_landmarks, rasterize_control, ControlImage, FaceParams, MorphableBasis,
};
use crate::nn::{Bound, ParamStore};

#[derive(Debug, Clone)]
pub struct FaceSnap {
    pub cfg: TrainConfig,
    pub base: DenoiserWeights,
    pub mixer: MixerWeights,
    pub ffr: Option<FFRNetWeights>,
    pub face_enc: FaceEncoder,
    pub clip_enc: ClipEncoder,
    pub basis: MorphableBasis,
    pub sched: NoiseSchedule,
}

impl FaceSnap {
    /// Fresh model. The base, encoders and face basis depend only on
    /// `model.base_seed`; the trainable parts on `train.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let base = DenoiserWeights::init(cfg.unet_config(), cfg.model.base_seed.wrapping_add(1))?;
        let mixer = MixerWeights::init(cfg.mixer_config(), cfg.train.seed.wrapping_add(2))?;
        let ffr = if cfg.ablation.use_ffrnet {
            Some(FFRNetWeights::init_from_base(&base, cfg.model.control_size, cfg.train.seed.wrapping_add(3))?)
        } else {
            None
        };
        Self::from_parts(cfg, base, mixer, ffr)
    }

    pub fn from_parts(
        cfg: TrainConfig,
        base: DenoiserWeights,
        mixer: MixerWeights,
        ffr: Option<FFRNetWeights>,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let seed = m.base_seed;
        let face_spec = EncoderSpec { kind: EncoderKind::StubId, seed: seed.wrapping_add(4), out_dim: m.d_id };
        let clip_spec = EncoderSpec { kind: EncoderKind::StubClip, seed: seed.wrapping_add(5), out_dim: m.d_clip };
        Ok(Self {
            face_enc: FaceEncoder::new(face_spec, m.latent_channels)?,
            clip_enc: ClipEncoder::new(clip_spec, m.latent_channels)?,
            basis: face_basis(&cfg),
            sched: NoiseSchedule::linear(cfg.train.timesteps)?,
            base,
            mixer,
            ffr,
            cfg,
        })
    }

    /// Trainable parameters (mixer and FFRNet) in one store.
    pub fn trainable_params(&self) -> ParamStore {
        let mut p = self.mixer.params().clone();
        if let Some(f) = &self.ffr {
            p.extend(f.params().clone());
        }
        p
    }

    /// Control image for a face under the configured control mode.
    pub fn control_for(&self, source: &FaceParams, drive: Option<&FaceParams>) -> Result<ControlImage> {
        let s = self.cfg.model.control_size;
        let drive = drive.unwrap_or(source);
        Ok(match self.cfg.ablation.control_mode {
            ControlMode::None => ControlImage::black(s, s),
            ControlMode::Drive => rasterize_control(&extract_landmarks(drive, &self.basis)?, s, s)?,
            ControlMode::Predictor => predict_landmarks(source, drive, &self.basis, s, s)?.1,
        })
    }

    /// Identity embedding, CLIP grid (both through `bbox`) and the
    /// full-frame identity embedding of a `[C, H, W]` image latent.
    pub fn encode_reference(&self, latent: &Tensor, bbox: BBox) -> (Tensor, Tensor, Tensor) {
        let g = Graph::new();
        let x = g.constant(latent.clone().insert_axis(Axis(0)));
        let f_id = self.face_enc.embed_image_var(x, bbox);
        let f_clip = self.clip_enc.grid_var(crop_resample_var(x, bbox, CANONICAL_CROP));
        let id_full = self.face_enc.embed_image_var(x, BBox::FULL);
        let first = |v: Var<'_>| v.value().index_axis(Axis(0), 0).to_owned();
        (first(f_id), first(f_clip), first(id_full))
    }

    pub fn prepare(&self, s: &Sample) -> Result<Prepared> {
        let (f_id, f_clip, id_ref) = self.encode_reference(&s.latent, s.bbox);
        let size = self.cfg.model.latent_size;
        let control = self.control_for(&s.source, s.drive.as_ref())?.to_chw();
        let mask = FaceMask::from_bbox(s.bbox, size, size).tensor().index_axis(Axis(0), 0).to_owned();
        Ok(Prepared { z0: s.latent.clone(), f_id, f_clip, id_ref, control, mask, ctx: s.ctx.clone() })
    }
}

/// Everything a training step needs from one sample, with the frozen
/// encoders already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub z0: Tensor,
    pub f_id: Tensor,
    pub f_clip: Tensor,
    pub id_ref: Tensor,
    pub control: Tensor,
    pub mask: Tensor,
    pub ctx: Tensor,
}

/// Prepared samples stacked along a new leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub z0: Tensor,
    pub f_id: Tensor,
    pub f_clip: Tensor,
    pub id_ref: Tensor,
    pub control: Tensor,
    pub mask: Tensor,
    pub ctx: Tensor,
}

fn stack(items: &[&Tensor]) -> Tensor {
    let views: Vec<_> = items.iter().map(|t| t.view()).collect();
    ndarray::stack(Axis(0), &views).expect("prepared samples share shapes")
}

impl Batch {
    pub fn from_items(items: &[&Prepared]) -> Self {
        let col = |f: fn(&Prepared) -> &Tensor| stack(&items.iter().map(|p| f(p)).collect::<Vec<_>>());
        Self {
            z0: col(|p| &p.z0),
            f_id: col(|p| &p.f_id),
            f_clip: col(|p| &p.f_clip),
            id_ref: col(|p| &p.id_ref),
            control: col(|p| &p.control),
            mask: col(|p| &p.mask),
            ctx: col(|p| &p.ctx),
        }
    }

    pub fn len(&self) -> usize {
        self.z0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Noise predictor with fixed identity conditioning: FFRNet residuals (when
/// enabled) from the control image and `f_mix`, and optionally `f_mix`
/// appended to the base context.
pub struct Conditioned<'a, 'g> {
    pub model: &'a FaceSnap,
    pub base: &'a Bound<'g>,
    pub ffr: Option<&'a Bound<'g>>,
    pub control: Var<'g>,
    pub f_mix: Var<'g>,
}

impl<'g> Conditioned<'_, 'g> {
    pub fn eps_at(&self, z_t: Var<'g>, ts: &[f64], ctx: Var<'g>) -> Result<Var<'g>> {
        let m = self.model;
        let residuals = match (self.ffr, &m.ffr) {
            (Some(b), Some(w)) => Some(ffrnet_forward_var(b, w, self.control, z_t, ts, self.f_mix)?),
            _ => None,
        };
        let ctx = if m.cfg.ablation.base_sees_f_mix() { z_t.graph().concat(&[ctx, self.f_mix], 1) } else { ctx };
        denoise_var(self.base, m.base.config(), z_t, ts, ctx, residuals.as_deref())
    }
}

impl<'g> EpsPredictor<'g> for Conditioned<'_, 'g> {
    fn eps(&self, z_t: Var<'g>, t: usize, ctx: Var<'g>) -> Result<Var<'g>> {
        let ts = vec![t as f64; z_t.dim(0)];
        self.eps_at(z_t, &ts, ctx)
    }
}
