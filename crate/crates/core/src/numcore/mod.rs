//! Dense rank-2 tensors, a sparse operator type and a small reverse-mode tape.
//!
//! The tape records every op appended to a [`Graph`]; node ids are handed out in
//! creation order, so reverse id order is a valid reverse topological order.

mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::check_gradients;
pub use sparse::CsrMatrix;
pub use tape::{dropout_mask, Graph, NodeId};
pub use tensor::Tensor2;
