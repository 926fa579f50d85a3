//! Numeric substrate: dense tensors, a reverse-mode tape, and a thin SVD
//! whose factors are differentiable. Everything else in the crate trains
//! against this module, and everything here is checkable against central
//! finite differences.

pub mod svd;
pub mod tape;
pub mod tensor;

pub use svd::{svd_backward, svd_thin, SvdFactors, SvdGrad};
pub use tape::{check_gradients, Gradients, NodeId, Tape};
pub use tensor::Tensor;
