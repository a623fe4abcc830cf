//! Objectives, optimisation and the training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use loss::{ds_loss, mce_loss, mle_loss, total_loss, LossBreakdown, LossConfig, LossVars};
pub use optim::{clip_gradients, Adam, AdamConfig};
pub use trainer::{
    batch_loss, fit, fit_with, token_nll, trainable, EpochRecord, LossObjective, TrainConfig,
    TrainOutcome, Trainer,
};
