//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! The tape supports a plain reverse sweep ([`Graph::backward`]) and a
//! recorded one ([`Graph::grad_graph`]) whose gradients are themselves graph
//! nodes, which is what differentiating through an inner update needs.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{
    analytic_gradient, compare_gradients, eval_loss, grad_check, relative_error, GradCheckReport,
    RELATIVE_ERROR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Epsilon used by every layer normalization in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;
