//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation,
//! sized for desk-scale transformer models.
//!
//! A [`Graph`] records every forward op; [`Graph::backward`] sweeps it once in
//! reverse. Parameters live outside the graph as plain [`Tensor`]s and are
//! re-inserted with [`Graph::param`] each step.

mod attention;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod optim;
mod tensor;

pub use attention::{attention_block, AttentionMask, MaskKind, MASKED_SCORE};
pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, grad_check_entries, grad_check_entries_scaled, op_suite, OpCheck, GRAD_TOLERANCE};
pub use graph::{Graph, Var};
pub use kernels::log_sum_exp;
pub use optim::Adam;
pub use tensor::Tensor;
