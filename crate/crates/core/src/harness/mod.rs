//! Optimizers, the training loop and memory profiling.

mod optim;
mod profile;
mod train;

pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, OptimizerKind};
pub use profile::{measure_step, profile_memory, rows_to_csv, ProfileRow, CSV_HEADER};
pub use train::{
    predict_detections, resolve_dataset, run_training, train, EpochMetrics, RunSummary, TrainConfig,
    TrainOutcome, TrainingRegime, DATA_DIR_ENV,
};
