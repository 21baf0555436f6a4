//! Hybrid digit classifier: CNN feature emissions, exhaustive
//! nearest-neighbour search, and a two-state Q-learner that picks a
//! corrective rotation for hard samples.

pub mod dataset;
mod error;
pub mod featstore;
pub mod imgops;
pub mod nn;
pub mod pipeline;
pub mod qlearn;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
