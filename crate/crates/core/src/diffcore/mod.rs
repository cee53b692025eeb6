//! Minimal reverse-mode differentiable tensor engine.
//!
//! Provides exactly the operations the disparity network and its training
//! losses need, each with an analytic backward pass validated against
//! central finite differences (`grad_check`). No broadcasting, no GPU, no
//! higher-order derivatives.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOutcome};
pub use tape::{Tape, TapeOp, Values, Var};
pub use tensor::Tensor;
