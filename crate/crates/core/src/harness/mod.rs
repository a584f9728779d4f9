//! Optimization, configuration, checkpoints and the cross-validated training loop.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{derive_seed, DataSource, TrainConfig};
pub use optim::{cosine_lr, Adam, StepRates};
pub use train::{cross_validate, cross_validate_with, ensemble_predict, evaluate, train, train_job, CvRun, Job, TrainedModel};
