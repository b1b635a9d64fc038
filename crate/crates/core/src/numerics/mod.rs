//! Dense tensors, reverse-mode autodiff and gradient checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, Worst};
pub(crate) use tape::{column_softmax, sigmoid};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;
