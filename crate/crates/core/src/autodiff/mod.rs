//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are define-by-run: every builder call computes its value
//! immediately. [`Graph::backward`] accumulates gradients from a scalar
//! root; [`finite_diff`] is the independent numerical oracle.

mod array;
mod backward;
mod check;
mod graph;
pub(crate) mod kernels;

pub use array::Array;
pub use backward::Gradients;
pub use check::{finite_diff, finite_diff_at, relative_error};
pub use graph::{DerivedFn, Graph, Var};
