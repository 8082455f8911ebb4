//! Dense matrices and a small reverse-mode differentiation engine.

pub mod check;
mod graph;
mod lu;
mod matrix;

pub use graph::{softmax_rows, Axis, Binary, Gradients, Graph, Reduce, Unary, Var};
pub use lu::{LuFactors, PIVOT_EPS};
pub use matrix::Matrix;
