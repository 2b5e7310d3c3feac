//! Dense linear algebra, deterministic randomness, similarity measures, and
//! the finite-difference gradient oracle.

mod matrix;
mod ops;
mod rng;

pub use matrix::{dot, matmul, norm, Matrix};
pub use ops::{argmax, cosine_sim, finite_diff_grad, relative_error, softmax, topk_indices};
pub(crate) use ops::softmax_in_place;
pub use rng::RngState;
