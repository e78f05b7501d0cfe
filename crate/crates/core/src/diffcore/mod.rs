//! Minimal differentiable-computation substrate: a recording graph over
//! small dense tensors, the handful of primitives the planner needs, Gumbel
//! sampling and a finite-difference checker.

mod gradcheck;
mod graph;
mod gumbel;
mod recurrent;
mod value;

pub use gradcheck::{grad_check, primitive_gradient_suite};
pub use graph::{argmax, huber, log_softmax, sigmoid, softmax, Graph, Var};
pub use gumbel::{gumbel_noise, gumbel_softmax, gumbel_softmax_with_noise};
pub use recurrent::GruCell;
pub use value::{Gradients, Owner, Param, ParamSet, Value};

