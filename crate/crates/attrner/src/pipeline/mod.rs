//! Training pipeline: configuration, learning-rate schedule, AdamW,
//! mini-batch loops with early stopping, multi-seed experiments, and the
//! two-stage classify-then-tag inference path.

pub mod config;
pub mod experiment;
pub mod optimizer;
pub mod schedule;
pub mod tagger;
pub mod trainer;

pub use config::{TrainConfig, TrainConfigError};
pub use experiment::{
    format_mean_std, mean_std, render_result, run_experiment, ExperimentArtifacts,
    ExperimentResult, SeedResult,
};
pub use optimizer::{adamw_step, AdamState, OptimError};
pub use schedule::{lr_at, warmup_steps};
pub use tagger::{tag_pipeline, ClassifierModel};
pub use trainer::{train_classifier, train_ner, CurvePoint, TrainError, TrainOutcome};
