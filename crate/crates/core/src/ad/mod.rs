//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! The layer primitives here are exactly what the factor model needs: matrix
//! multiply, bias add, ELU, sigmoid, elementwise arithmetic, row
//! concatenation, reductions, L2 row normalization and batch normalization,
//! plus the kernel-distance helpers the balancing losses are built from.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{sigmoid, softplus, softplus_inverse, BatchStats, Gradients, Tape, BN_EPS};
pub use tensor::{NodeId, Tensor};

pub(crate) use tape::pairwise_sq_dists;
