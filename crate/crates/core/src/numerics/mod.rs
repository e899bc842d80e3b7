//! Dense tensors, stable probability primitives and reverse-mode differentiation.

pub mod gradcheck;
pub mod stable;
mod tape;
pub(crate) mod tensor;

pub use stable::{entropy, log_gaussian_isotropic, logsumexp, softmax_rows};
pub use tape::{Gradients, Graph, Var};
pub use tensor::Tensor;
