//! Deterministic dense kernels, a seeded generator and a gradient tape.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use linalg::singular_values;
pub use ops::{frobenius, matmul, softmax_rows};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
