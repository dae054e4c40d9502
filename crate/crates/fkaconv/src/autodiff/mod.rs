//! Minimal dense-array math with reverse-mode differentiation.

mod broadcast;
mod graph;
mod registry;
mod tensor;

pub use graph::{BinaryKind, BnState, Graph, NodeId, UnaryKind};
pub use registry::ParamRegistry;
pub use tensor::{Dtype, Real, Shape, Tensor, MAX_RANK};
