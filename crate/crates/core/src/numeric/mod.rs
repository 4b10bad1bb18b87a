//! Dense kernels with reverse-mode gradients, Adam, and finite-difference checks.

mod adam;
mod dense;
mod gradcheck;
mod tape;
mod tensor;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use dense::{forward_stack, Dense};
pub use gradcheck::{grad_check, GradCheckReport, MAX_CHECKED_COORDS};
pub use tape::{bce_mean, sigmoid, Activation, DenseVars, Gradients, ParamId, ParamStore, Tape, Var, PROB_EPS};
pub use tensor::Tensor2;
pub use train::{EpochMetrics, TrainConfig, Trainer};
