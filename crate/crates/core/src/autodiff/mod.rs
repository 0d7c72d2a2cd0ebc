//! Minimal reverse-mode tensor engine backing the translation networks.

pub mod conv;
pub mod graph;
pub mod tensor;

pub use conv::{ConvGeom, PadMode};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
