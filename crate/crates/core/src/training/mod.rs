//! Model assembly, Adam, the training loop and checkpoints.

mod checkpoint;
mod model;
mod optim;
mod train;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION,
};
pub use model::{
    build_model, evaluate, InputLayer, ModelKind, ModelSpec, Noise, PriorConfig, StepOutput, TrainedModel,
};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use train::{train, EpochRecord, TrainConfig, TrajectoryLog};
