//! Merged convolutional autoencoder: one encoder, several decoders joined by
//! merge (skip) connections, trained with selective minimum-loss
//! backpropagation and evaluated with averaged-decoder inference.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod trainer;
