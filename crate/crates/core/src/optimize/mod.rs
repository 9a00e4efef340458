//! Gradients, Adam, the training loop and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod step;
mod train;

pub use adam::{adam_step, lr_schedule, AdamConfig, AdamState, LrSchedule};
pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, CheckpointHeader, TensorEntry, TrainState};
pub use config::{BackgroundMode, FieldSize, OriginConfig, PoseConfig, RunConfig, ScorerKind};
pub use step::{evaluate, Crop, StepOutcome, StepSpec};
pub use train::{
    init_state, read_metrics, MetricRow, PosedView, Trainer, ViewSource, CHECKPOINT_FILE, METRICS_FILE,
    METRICS_HEADER, REFERENCE_FOCAL_SCALE,
};
