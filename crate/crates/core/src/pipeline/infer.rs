//! Inference, the pose-template evaluation and the toy metrics.

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::caption_context;
use super::model::{Conditioned, FaceSnap};
use crate::attribute_mixer::{mix_forward_var, ClipFeatureGrid, FaceIDEmbedding};
use crate::autograd::{Graph, Tensor};
use crate::diffusion::{gaussian, guided_sample_var};
use crate::encoders::{clip_face_sim, face_sim, BBox};
use crate::error::{Error, Result};
use crate::landmark3d::{FaceParams, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    /// `[C, H, W]` reference latent.
    pub reference: Tensor,
    /// Face box in the reference; the default centered box when absent.
    pub bbox: Option<BBox>,
    /// Source face parameters; neutral when absent.
    pub source: Option<FaceParams>,
    pub drive: FaceParams,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferReport {
    pub seed: u64,
    pub prompt: String,
    pub feature_mode: String,
    pub use_ffrnet: bool,
    pub control_mode: String,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    /// Cosine of identity embeddings, generated vs reference, in `[-1, 1]`.
    pub face_sim: f64,
    /// Cosine of mean-pooled CLIP grids, generated vs reference.
    pub clip_face: f64,
}

impl InferReport {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn embeddings(model: &FaceSnap, latent: &Tensor, bbox: BBox) -> Result<(FaceIDEmbedding, ClipFeatureGrid)> {
    let (f_id, f_clip, _) = model.encode_reference(latent, bbox);
    Ok((FaceIDEmbedding::new(f_id.iter().copied().collect())?, ClipFeatureGrid::new(f_clip)?))
}

/// Generate one latent with classifier-free guidance and score it against
/// the reference through the same box.
pub fn infer(model: &FaceSnap, req: &InferRequest) -> Result<(Tensor, InferReport)> {
    let cfg = &model.cfg;
    let m = &cfg.model;
    let want = [m.latent_channels, m.latent_size, m.latent_size];
    if req.reference.shape() != want {
        return Err(Error::shape("reference latent", want, req.reference.shape()));
    }
    let bbox = req.bbox.unwrap_or(BBox::DEFAULT).validated()?;
    let source = req.source.clone().unwrap_or_else(|| FaceParams::neutral(m.k_shape, m.k_expr));
    let control = model.control_for(&source, Some(&req.drive))?.to_chw();
    let (f_id, f_clip, _) = model.encode_reference(&req.reference, bbox);

    let g = Graph::new();
    let base = model.base.bind(&g, false);
    let mixer = model.mixer.bind(&g, false);
    let ffr = model.ffr.as_ref().map(|f| f.bind(&g, false));
    let c = |t: Tensor| g.constant(t.insert_axis(Axis(0)));
    let f_mix = mix_forward_var(&mixer, model.mixer.config(), c(f_id), c(f_clip))?;
    let cond = Conditioned { model, base: &base, ffr: ffr.as_ref(), control: c(control), f_mix };
    let ctx = c(caption_context(&req.prompt, m.ctx_tokens, m.d));
    let null = c(model.base.null_ctx().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let x_t = g.constant(gaussian(&[1, want[0], want[1], want[2]], &mut rng));
    let out = guided_sample_var(&cond, ctx, null, x_t, cfg.infer.sample_steps, cfg.infer.guidance_scale, &model.sched)?;
    let latent = out.value().index_axis(Axis(0), 0).to_owned();
    if latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::range("generated latent", "non-finite values"));
    }

    let (ref_id, ref_clip) = embeddings(model, &req.reference, bbox)?;
    let (gen_id, gen_clip) = embeddings(model, &latent, bbox)?;
    let report = InferReport {
        seed: req.seed,
        prompt: req.prompt.clone(),
        feature_mode: cfg.ablation.feature_mode.as_str().to_string(),
        use_ffrnet: cfg.ablation.use_ffrnet,
        control_mode: cfg.ablation.control_mode.as_str().to_string(),
        sample_steps: cfg.infer.sample_steps,
        guidance_scale: cfg.infer.guidance_scale,
        face_sim: face_sim(&gen_id, &ref_id)?,
        clip_face: clip_face_sim(&gen_clip, &ref_clip)?,
    };
    Ok((latent, report))
}

/// An identity for evaluation: reference latent, optional box and its face parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IdEntry {
    pub name: String,
    pub latent: Tensor,
    pub bbox: Option<BBox>,
    pub params: FaceParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub pose: String,
    pub face_sim: f64,
    pub clip_face: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<EvalRow>,
}

impl MetricsTable {
    pub fn mean_face_sim(&self) -> f64 {
        self.rows.iter().map(|r| r.face_sim).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_clip_face(&self) -> f64 {
        self.rows.iter().map(|r| r.clip_face).sum::<f64>() / self.rows.len() as f64
    }

    /// Tab-separated rows followed by a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tpose\tface_sim\tclip_face\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\n", r.id, r.pose, r.face_sim, r.clip_face));
        }
        s.push_str(&format!("mean\t*\t{:.6}\t{:.6}\n", self.mean_face_sim(), self.mean_clip_face()));
        s
    }
}

/// Ten head orientations: frontal, four yaws, three pitches, two rolls.
pub fn pose_templates(k_shape: usize, k_expr: usize) -> Vec<(String, FaceParams)> {
    let poses = [
        ("frontal", 0.0, 0.0, 0.0),
        ("yaw_l30", -0.52, 0.0, 0.0),
        ("yaw_l15", -0.26, 0.0, 0.0),
        ("yaw_r15", 0.26, 0.0, 0.0),
        ("yaw_r30", 0.52, 0.0, 0.0),
        ("pitch_up", 0.0, -0.25, 0.0),
        ("pitch_down", 0.0, 0.25, 0.0),
        ("pitch_up_yaw", 0.26, -0.2, 0.0),
        ("roll_l", 0.0, 0.0, -0.2),
        ("roll_r", 0.0, 0.0, 0.2),
    ];
    poses
        .iter()
        .map(|&(name, yaw, pitch, roll)| {
            let mut p = FaceParams::neutral(k_shape, k_expr);
            p.pose = Pose { yaw, pitch, roll, ..Pose::default() };
            (name.to_string(), p)
        })
        .collect()
}

/// Generate every (id, pose) pair and score it. Row `i` uses seed `seed + i`.
pub fn evaluate(
    model: &FaceSnap,
    ids: &[IdEntry],
    poses: &[(String, FaceParams)],
    prompt: &str,
    seed: u64,
) -> Result<MetricsTable> {
    if ids.is_empty() {
        return Err(Error::Usage("evaluation needs at least one identity".into()));
    }
    if poses.is_empty() {
        return Err(Error::Usage("evaluation needs at least one pose template".into()));
    }
    let mut rows = Vec::with_capacity(ids.len() * poses.len());
    for id in ids {
        for (pose_name, drive) in poses {
            let req = InferRequest {
                reference: id.latent.clone(),
                bbox: id.bbox,
                source: Some(id.params.clone()),
                drive: drive.clone(),
                prompt: prompt.to_string(),
                seed: seed.wrapping_add(rows.len() as u64),
            };
            let (_, report) = infer(model, &req)?;
            rows.push(EvalRow {
                id: id.name.clone(),
                pose: pose_name.clone(),
                face_sim: report.face_sim,
                clip_face: report.clip_face,
            });
        }
    }
    Ok(MetricsTable { rows })
}

/// Frechet Inception Distance needs a pre-trained Inception network.
pub fn fid(_generated: &[Tensor], _reference: &[Tensor]) -> Result<f64> {
    Err(Error::NotImplemented {
        metric: "FID",
        reason: "requires a pre-trained Inception network and real image statistics",
    })
}

/// CLIP text-image score needs a pre-trained CLIP text and image model.
pub fn clip_t(_generated: &[Tensor], _prompts: &[String]) -> Result<f64> {
    Err(Error::NotImplemented { metric: "CLIP-T", reason: "requires pre-trained CLIP text and image encoders" })
}
