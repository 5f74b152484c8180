//! CPU numerics: dense f64 tensors, a tape-based reverse-mode autodiff
//! graph, the Adam optimizer, small dense linear-algebra helpers, and a
//! finite-difference utility used by gradient tests.

pub mod fd;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, Var};
pub use linalg::{lstsq, random_orthonormal_cols, residual_outside_colspace, solve_inplace};
pub use optim::{adam_step, clip_global_norm, AdamHyper, AdamState};
pub use tensor::Tensor;
