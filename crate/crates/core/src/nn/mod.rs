//! Trainable convolutional network with double-precision backprop.

mod checkpoint;
mod gradcheck;
mod layers;
mod model;
mod train;

pub use checkpoint::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use gradcheck::{grad_check, grad_check_model, GradCheckReport, FD_STEP};
pub use layers::{LayerSpec, Params};
pub use model::{CnnModel, ForwardOutput, Grads, EMISSION_DIM, FLATTEN_DIM, NUM_CLASSES};
pub use train::{accuracy, train, BatchRecord, TrainConfig, TrainHistory, ValidationRecord};
