//! KronTime: Kronecker-decomposed self-attention for long time series
//! classification.
//!
//! The crate is organized around five building blocks:
//!
//! - [`tensor`]: dense row-major tensors, mode-i flattening/folding, batched
//!   matmul and row softmax — the substrate the attention kernels run on.
//! - [`attention`]: full attention, per-level factor attention, the
//!   sequential Kronecker-decomposed forward/backward passes, and the
//!   brute-force operator materialization used to cross-check them.
//! - [`model`]: a patch-embedding transformer backbone whose attention
//!   layers use the decomposed kernel, plus a linear classification head.
//! - [`train`]: cross-entropy, Adam, stratified splits and an
//!   early-stopping training loop.
//! - [`data`]: a `.ts` dataset parser, z-normalization and synthetic
//!   dataset generators.

pub mod attention;
pub mod check;
pub mod data;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::{DenseTensor, ModeMatrix, TensorError};
