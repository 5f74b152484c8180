//! Training: manifest loading into memory-resident batches, the five step
//! types, and the three-stage curriculum driver with checkpointed resume.

pub mod data;
pub mod stages;
pub mod steps;

pub use data::{registry_from_meta, TrainItem, TrainSet};
pub use stages::{
    final_checkpoint_name, latest_snapshot, partial_checkpoint_name, train_eval_asr,
    CurriculumConfig, MetricsLog, Trainer, EVAL_ASR_CHECKPOINT,
};
pub use steps::{acoustic_features, ExternalLabels, StepConfig};
