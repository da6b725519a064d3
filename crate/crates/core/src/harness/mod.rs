//! Training, evaluation and rollout statistics.

mod checkpoint;
mod eval;
mod metrics;
mod train;

pub use checkpoint::{Checkpoint, ResumeState};
pub use eval::{constant_baseline, evaluate, evaluate_predictions, improvement, rollout_stats, EvalReport, RolloutStats};
pub use metrics::{
    relative_l2, spatiotemporal_error_field, wasserstein1, weighted_relative_l2, HistogramPair, Summary,
};
pub use train::{
    check_compatible, mean_error, split_indices, train, EpochRecord, Schedule, TrainConfig, TrainReport,
};
