//! Minimal differentiable numeric kernel: dense `f64` matrices, a seeded
//! generator, reverse-mode autodiff, softmax with additive bias, and a
//! finite-difference gradient checker.

mod gradcheck;
mod rng;
mod softmax;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_tape, GRAD_CHECK_EPS_MAX, GRAD_CHECK_EPS_MIN};
pub use rng::{seeded_gaussian, Rng, RngState};
pub use softmax::{softmax_with_bias, MASK_SENTINEL};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor2;
