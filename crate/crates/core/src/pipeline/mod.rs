//! Orchestration: configuration, data, training, checkpoints, inference,
//! evaluation and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod infer;
pub mod io;
pub mod model;
pub mod optim;
pub mod train;

pub use ablation::{ablation_tsv, run_ablation, AblationMatrix, AblationResult, AblationRun};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use config::{ControlMode, TrainConfig};
pub use data::{caption_context, dataset_for, load_dataset, synthetic_dataset, write_dataset, Sample};
pub use infer::{
    clip_t, evaluate, fid, infer, pose_templates, EvalRow, IdEntry, InferReport, InferRequest, MetricsTable,
};
pub use model::{Batch, Conditioned, FaceSnap, Prepared};
pub use optim::{AdamW, AdamWConfig};
pub use train::{loss_graph, BoundModel, LossVars, StepDraws, Trainer};
