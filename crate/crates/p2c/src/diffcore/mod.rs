//! Minimal differentiable-computation substrate.
//!
//! Dense row-major f64 tensors, a gradient tape restricted to the fixed set
//! of primitives the model graph needs (affine, tanh, relu, l2-normalize,
//! concat/slice, softmax cross-entropy, mse, scalar add/scale), hand-derived
//! backward rules, and a central-finite-difference gradient checker. There is
//! no general autodiff: the graph is small and fixed, so every backward rule
//! stays auditable.

mod gradcheck;
mod tape;
mod tensor;


pub use gradcheck::{check_gradients, relative_error, GradCheckReport, ParamGradCheck, FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Norms at or below this are treated as degenerate by `l2_normalize`.
/// Far below any embedding norm the model produces; guards only true degeneracy.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("degenerate embedding: norm {norm:e} is at or below {eps:e}")]
    DegenerateEmbedding { norm: f64, eps: f64 },
    #[error("class index {index} out of range for {count} classes")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("slice [{start}, {start}+{len}) out of bounds for {total} elements")]
    SliceOutOfBounds {
        start: usize,
        len: usize,
        total: usize,
    },
    #[error("expected a scalar, got shape {got:?}")]
    NotScalar { got: Vec<usize> },
    #[error("operation requires at least one input")]
    EmptyInput,
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}
