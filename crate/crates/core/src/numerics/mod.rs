//! Dense tensors, reverse-mode autodiff, and Adam — the numeric substrate
//! for every other module.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::gradcheck;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{DType, Tensor};
