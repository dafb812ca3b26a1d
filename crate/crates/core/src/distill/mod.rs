//! Offline distillation: fit a one-step student to teacher noise/image pairs
//! with an L1 reconstruction loss, AdamW and an EMA of the weights.

mod checkpoint;
mod optim;
mod state;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{adamw_update, ema_update, l1_loss, AdamWConfig};
pub use state::{check_dataset, EpochSampler, StepStats, TrainConfig, TrainState};
pub use train::{checkpoint_path, run_steps, train, MetricsLog, METRICS_HEADER};
