//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in insertion
//! order; [`Graph::backward`] replays the tape in reverse and accumulates
//! adjoints into the `grad` field of every tensor in the graph. Parameters
//! live outside the graph as plain [`Tensor`] values and are re-inserted as
//! leaves each step, which keeps graphs single-use and trivially `Send`.

mod grad_check;
mod graph;
mod tensor;

pub use grad_check::{grad_check, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
