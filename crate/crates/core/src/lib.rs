//! Identity-preserving portrait generation at toy scale: feature fusion,
//! 3D-landmark control, a zero-initialized control network and the full
//! training objective on a small latent-diffusion model.

pub mod attribute_mixer;
pub mod autograd;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod ffrnet;
pub mod landmark3d;
pub mod nn;
pub mod pipeline;

pub use attribute_mixer::{
    mix_forward, ClipFeatureGrid, FaceIDEmbedding, FeatureMode, FusedFeatures, MixerConfig, MixerWeights, TokenSequence,
};
pub use diffusion::{DenoiserWeights, LossBreakdown, MaskNorm, NoiseSchedule, ResidualSet, UNetConfig};
pub use encoders::{BBox, EncoderKind, EncoderSpec, FaceCrop, FaceMask};
pub use error::{Error, Result};
pub use ffrnet::FFRNetWeights;
pub use landmark3d::{ControlImage, FaceParams, LandmarkSet72, MorphableBasis, Pose};
pub use pipeline::{Checkpoint, ControlMode, FaceSnap, TrainConfig, Trainer};
