//! Minimal neural-network plumbing on top of `candle-core`: parameter
//! registry, dense/normalisation layers, Adam and the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use layers::{leaky_relu, relu, sigmoid, softmax_last, BatchNorm, Conv1d, Linear};
pub use params::{Init, ParamStore};
