//! Dense tensors, seeded randomness, a reverse-mode tape, momentum SGD, and
//! the finite-difference gradient oracle.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use optim::{
    clip_grads_by_norm, clip_grads_per_tensor, sgd_momentum_step, sgd_momentum_step_subset,
    ModelParams, OptimizerState, ParamGrads,
};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dropout, dropout_mask, log_softmax, logsumexp, matmul, Tensor};
