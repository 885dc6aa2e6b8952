//! Dense tensors, reverse-mode automatic differentiation for small MLPs, and
//! counter-based random number streams.

pub mod linalg;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use rng::RngStream;
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;
