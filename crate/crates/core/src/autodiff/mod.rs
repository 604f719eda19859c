//! Dense `f64` tensors and a define-by-run reverse-mode tape.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{logsumexp, BatchNormOutput, Tape, Var, L2_FLOOR};
pub use tensor::Tensor;
