//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Every value lives inside a [`Graph`]. Operations on [`Var`] handles
//! append nodes to the graph; when at least one input requires a gradient
//! the node also records its local gradient rule, and [`Graph::backward`]
//! replays the recorded rules in reverse construction order.
//!
//! Broadcasting is limited to scalar-over-tensor and row-vector-over-matrix.
//! Anything else needs an explicit reshape.

mod check;
mod error;
mod graph;
mod tensor;

pub use check::{central_difference, max_relative_error};
pub use error::TensorError;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
