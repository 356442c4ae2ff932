//! Hybrid generative-contrastive representation learning over color-quantized
//! image tokens.
//!
//! A single autoregressive transformer is split into an encoder, whose pooled
//! output feeds a contrastive projection head, and a decoder that predicts the
//! next token in raster order. See the crate README for the command-line tool.

// `!(x > 0.0)` rejects NaN along with non-positive values; index loops read
// better than iterator chains in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod model;
pub mod ood;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::{Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use image::Image;
pub use model::{GcrlModel, ModelConfig};
pub use quantizer::{Codebook, TokenGrid};
pub use tensor::{Tape, Tensor, Var};
