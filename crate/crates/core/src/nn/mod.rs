//! Minimal deterministic tensor engine: dense tensors, the operators the
//! detector needs with hand-written backward passes, Adam, and checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod ops;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tensor::Tensor;
