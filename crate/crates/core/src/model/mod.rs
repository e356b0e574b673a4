//! Byte-level language model built from the residual blocks, with a
//! hand-derived backward pass, Adam training and checkpointing.

mod config;
mod gradcheck;
mod lm;
mod train;
pub mod vocab;

pub use config::{ModelConfig, PRESETS};
pub use gradcheck::{check_model_gradients, GradCheckOptions, ParamCheck};
pub use lm::{cross_entropy, position_losses, Model, MODEL_FORMAT};
pub use train::{load_any_model, sample_batch, TrainConfig, TrainState, TRAIN_FORMAT};
