//! Low-rank codebook weight quantization for transformer blocks.
//!
//! Each group of `G` weights is quantized against its own row of a codebook
//! `C = SᵀV − B`, where `S` (rank × groups) and `V` (rank × levels) are
//! learned by gradient descent through a straight-through segmented
//! quantizer. The crate is `no_std` (with `alloc`); file formats and the
//! command-line driver live in the companion `lcq` crate.
//!
//! Module map:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense f64 tensors and a
//!   reverse-mode tape with custom-gradient nodes.
//! - [`codebook`]: configuration, reparameterization and codebook assembly.
//! - [`quantizer`]: sorted codebooks, the segmented quantizer with its
//!   straight-through backward, and a brute-force oracle.
//! - [`block`]: the toy pre-norm transformer block and synthetic data.
//! - [`init`]: clip-search initialization of the rank-1 parameters.
//! - [`trainer`]: block reconstruction loss, AdamW, the per-block loop.
//! - [`doubleq`]: grid-searched uniform re-quantization of `S` and `V`.
//! - [`storage`]: index packing, the artifact model and bit accounting.
//! - [`oracle`]: randomized check of the quantizer against brute force.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod block;
pub mod codebook;
pub mod doubleq;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layout;
pub mod math;
pub mod oracle;
pub mod quantizer;
pub mod storage;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
