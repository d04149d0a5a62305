//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Everything is two-dimensional: vectors are `1×n` or `n×1` matrices and
//! scalars are `1×1`. A [`Graph`] is built per forward pass, evaluated
//! eagerly, and differentiated once with [`Graph::backward`].

mod graph;
mod params;

pub mod gradcheck;

pub use graph::{softmax_rows, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};

pub type Matrix = ndarray::Array2<f64>;
