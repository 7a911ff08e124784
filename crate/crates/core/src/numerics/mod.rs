//! Dense tensors, reverse-mode differentiation, the optimizer and the
//! finite-difference oracle.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod vector;

pub use gradcheck::{finite_diff_grad, max_relative_error, max_relative_error_with_floor};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use vector::{cosine_sim, cosine_sim_matrix, l2_normalize};
