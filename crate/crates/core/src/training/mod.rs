//! Optimizer, schedule, augmentation and the training loop.

pub mod augment;
pub mod ohem;
pub mod optim;
mod trainer;

pub use augment::{AugmentConfig, AugmentDraw, AugmentParams};
pub use ohem::{ohem_cross_entropy, OhemConfig};
pub use optim::{sgd_step, OptimizerState, PolySchedule};
pub use trainer::{
    dataset_mean, evaluate, sample_batch, train, train_step, Event, IterRecord, Observer, TrainConfig, TrainState,
};
