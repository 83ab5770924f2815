//! Dense tensors and reverse-mode automatic differentiation for panofuse.
//!
//! The crate is deliberately small and self-contained: a row-major
//! [`Tensor`] over [`f32`] or [`f64`], a define-by-run [`Tape`] that records
//! every operation and replays it backwards, numeric gradient checking, and a
//! simple on-disk tensor dump format for cross-checking against external
//! tooling.
//!
//! Two properties hold everywhere and tests rely on them:
//!
//! * **Determinism.** Every kernel visits elements in a fixed order and never
//!   spawns threads, so identical inputs produce bit-identical outputs.
//! * **Wide accumulation.** Reductions (matrix products, pooling, norms,
//!   losses) accumulate in `f64` regardless of the storage type, and the
//!   backward pass propagates `f64` gradients end to end.

mod error;
mod scalar;
mod tensor;

pub mod dump;
pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::{Precision, Scalar};
pub use tape::{Labels, Tape, ValueId};
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T, E = TensorError> = std::result::Result<T, E>;
