//! Optimization, checkpoints and evaluation.

pub mod adam;
pub mod checkpoint;
pub mod eval;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use eval::{evaluate, evaluate_manifest, predict_images, predict_scores};
pub use trainer::{
    accuracy, check_disjoint, train, train_manifests, BestTracker, EpochRecord, LogHooks, TrainConfig, TrainHooks,
    TrainOutcome,
};
