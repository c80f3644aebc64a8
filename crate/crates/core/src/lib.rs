//! Group-sparse convolution engine.
//!
//! Convolutions are lowered to a single dense GEMM through im2col. Each input
//! map carries a spatial sparsity pattern; dropping a kernel group removes a
//! column from the filter matrix and the matching row from the patch matrix,
//! so both factors stay dense but get thinner. On top of that sit a small
//! trainable network stack, group-sparsity regularizers and the procedures
//! that sparsify trained networks.

pub mod bench;
pub mod damage;
pub mod data;
pub mod error;
pub mod lowering;
pub mod net;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
