//! Dense-tensor numerical core: reverse-mode differentiation on a tape, a
//! decoupled-weight-decay optimizer, and purpose-streamed deterministic RNG.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::AdamW;
pub use tape::{GradTable, Tape, Var};
pub use tensor::Tensor;
