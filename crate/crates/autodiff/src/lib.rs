//! Differentiable-computation substrate for the detector.
//!
//! * [`Tensor`]: dense row-major `f64` storage.
//! * [`Tape`] / [`Var`]: reverse-mode differentiation over tensor ops,
//!   including gradient reversal and convex feature mixing.
//! * [`Real`] / [`Dual`]: forward-mode scalars so per-sample losses can be
//!   written once and differentiated exactly (to second order when nested).
//! * [`ParamStore`] / [`Sgd`]: parameters and the optimiser.
//!
//! Everything is single-threaded and deterministic.

mod loss;
mod nn;
mod ops;
mod optim;
mod real;
mod tape;
mod tensor;
pub mod testing;

pub use loss::{scale_derivative_and_grad, value_and_grad, SampleLoss};
pub use nn::softmax;
pub use ops::{concat, sigmoid};
pub use optim::{ParamStore, Sgd, SgdConfig};
pub use real::{seed, Dual, Real};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
