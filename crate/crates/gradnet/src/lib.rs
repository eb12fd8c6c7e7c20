//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Computations are recorded on a [`Graph`] as they run. Calling
//! [`Graph::backward`] on a scalar node walks the recorded nodes in reverse
//! creation order and accumulates gradients into every node that requires
//! them. Named parameters live in a [`ParamStore`] and are bound to a graph
//! with [`Graph::param`]; their gradients come back keyed by name.
//!
//! Everything is `f64` and single-threaded per graph. Minibatches are
//! handled by building one graph per sample and summing the resulting
//! [`Gradients`].

// `!(x > 0.0)` is how NaN gets rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod graph;
pub mod linalg;
mod params;
mod tensor;

pub mod checkpoint;

pub use error::GradError;
pub use graph::{op_set, Gradients, Graph, Var};
pub use params::{Init, ParamSpec, ParamStore};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, GradError>;
