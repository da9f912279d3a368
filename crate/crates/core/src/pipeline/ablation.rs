//! Ablation matrix: named overrides of the feature mode, FFRNet use and
//! control source, each trained briefly and scored on one generation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ControlMode, TrainConfig};
use super::data::Sample;
use super::infer::{infer, pose_templates, InferReport, InferRequest};
use super::train::Trainer;
use crate::attribute_mixer::FeatureMode;
use crate::diffusion::LossBreakdown;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub name: String,
    pub feature_mode: FeatureMode,
    pub use_ffrnet: bool,
    pub control_mode: ControlMode,
    #[serde(default)]
    pub base_id_attention: bool,
}

impl AblationRun {
    fn new(name: &str, feature_mode: FeatureMode, use_ffrnet: bool, control_mode: ControlMode) -> Self {
        Self { name: name.into(), feature_mode, use_ffrnet, control_mode, base_id_attention: false }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.ablation.feature_mode = self.feature_mode;
        cfg.ablation.use_ffrnet = self.use_ffrnet;
        cfg.ablation.control_mode = self.control_mode;
        cfg.ablation.base_id_attention = self.base_id_attention;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    /// Training steps per run; the config's `train.steps` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_steps: Option<u64>,
    pub run: Vec<AblationRun>,
}

impl AblationMatrix {
    /// The feature-fusion comparison (four input variants) and the FFRNet
    /// comparison (no FFRNet, no landmarks, raw driving landmarks), sharing
    /// the full model as the reference row.
    pub fn standard_rows() -> Self {
        use ControlMode as C;
        use FeatureMode as F;
        Self {
            train_steps: None,
            run: vec![
                AblationRun::new("face_id_embeddings", F::Id, true, C::Predictor),
                AblationRun::new("clip_image_features", F::Clip, true, C::Predictor),
                AblationRun::new("concat_with_projection", F::Concat, true, C::Predictor),
                AblationRun::new("attribute_mixer_full", F::Mixer, true, C::Predictor),
                AblationRun::new("without_ffrnet", F::Mixer, false, C::Predictor),
                AblationRun::new("ffrnet_without_landmark", F::Mixer, true, C::None),
                AblationRun::new("ffrnet_with_drive_landmark", F::Mixer, true, C::Drive),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text)?;
        if m.run.is_empty() {
            return Err(Error::Config("ablation matrix has no [[run]] entries".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub name: String,
    pub losses: Vec<LossBreakdown>,
    pub report: InferReport,
}

/// Train each run from scratch on `samples`, then generate one image from
/// the first sample under a non-frontal pose template.
pub fn run_ablation(base: &TrainConfig, matrix: &AblationMatrix, samples: &[Sample]) -> Result<Vec<AblationResult>> {
    let reference = samples.first().ok_or_else(|| Error::Usage("ablation needs at least one sample".into()))?;
    let steps = matrix.train_steps.unwrap_or(base.train.steps);
    matrix
        .run
        .iter()
        .map(|run| {
            let cfg = run.apply(base);
            let mut trainer = Trainer::new(cfg.clone(), samples)?;
            let losses = trainer.train(steps)?;
            let model = trainer.into_model();
            let drive = pose_templates(cfg.model.k_shape, cfg.model.k_expr).swap_remove(2).1;
            let req = InferRequest {
                reference: reference.latent.clone(),
                bbox: Some(reference.bbox),
                source: Some(reference.source.clone()),
                drive,
                prompt: reference.caption.clone(),
                seed: cfg.train.seed,
            };
            let (_, report) = infer(&model, &req)?;
            Ok(AblationResult { name: run.name.clone(), losses, report })
        })
        .collect()
}

/// One TSV line per run: name, final losses and generation scores.
pub fn ablation_tsv(results: &[AblationResult]) -> String {
    let mut s = String::from("run\tfeature_mode\tuse_ffrnet\tcontrol_mode\tl_diff\tl_id\tface_sim\tclip_face\n");
    for r in results {
        let last = r.losses.last();
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.name,
            r.report.feature_mode,
            r.report.use_ffrnet,
            r.report.control_mode,
            last.map_or(f64::NAN, |l| l.l_diff),
            last.map_or(f64::NAN, |l| l.l_id),
            r.report.face_sim,
            r.report.clip_face,
        ));
    }
    s
}
