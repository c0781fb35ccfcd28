//! Algorithmic core of the bidirectional autoregressive motion model.
//!
//! Everything in this crate is pure and allocation-only (`no_std` + `alloc`):
//!
//! * [`mask`] builds the hybrid causal attention masks and the training,
//!   refinement and editing mask patterns over a `[cond, x_1..x_t, END]`
//!   sequence layout.
//! * [`vq`] holds codebooks, nearest-code search, residual quantization and
//!   the EMA / dead-code maintenance of codebooks.
//! * [`guidance`] combines conditional and unconditional logits and samples
//!   from the result.
//! * [`corrupt`] and [`loss`] implement the input corruption, condition
//!   dropout and hybrid negative log-likelihood bookkeeping used in training.
//! * [`histogram`] provides generated-length histograms and mode detection.
//!
//! Tensor-heavy code (networks, training loops, IO) lives in the `bamm` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod corrupt;
pub mod error;
pub mod guidance;
pub mod histogram;
pub mod loss;
pub mod mask;
pub mod vq;

pub use error::{CoreError, Result};
pub use mask::{MaskMatrix, MaskMode, MaskSplit, SequenceLayout, UnmaskedSet};
pub use vq::{Codebook, RvqStack, TokenGrid};

/// Token id used in sequences. Motion codes occupy `[0, K)`, END is `K`.
pub type TokenId = u32;
