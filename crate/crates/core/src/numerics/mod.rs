//! Dense NCHW tensors, a reverse-mode tape, and optimizers.

pub mod conv;
pub mod gradcheck;
pub mod optim;
mod tape;
mod tensor;

pub use conv::Padding;
pub use gradcheck::{
    finite_diff_check, finite_diff_check_with, weighted_sum, GradCheckReport, KinkPolicy,
};
pub use optim::{optimizer_step, AdamHyper, Method, OptimizerState};
pub use tape::{sigmoid, Elementwise, MeanOver, Tape, Var, DEFAULT_POW_GRAD_CAP};
pub use tensor::{Shape, Tensor};
