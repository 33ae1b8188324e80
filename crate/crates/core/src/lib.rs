//! Super tiny language model laboratory.
//!
//! The crate bundles everything needed to build, train and audit small
//! decoder-only transformers on a single CPU:
//!
//! - [`numerics`]: dense tensors with a reverse-mode tape and gradient checking.
//! - [`tokenizer`]: byte-level BPE that reports each token's byte span.
//! - [`model`]: the configurable transformer (RoPE / sin-cos / learned
//!   positions, grouped-query attention, SwiGLU or GeLU FFN, weight tying, LoRA
//!   deltas on shared FFNs).
//! - [`bytepool`]: the tokenizer-free embedder that pools byte chunks into token
//!   representations and decodes hidden states back into bytes.
//! - [`audit`]: closed-form parameter accounting.
//! - [`data`]: corpus ingestion, batching, AdamW, LR schedule, checkpoints.
//! - [`eval`]: byte-normalized perplexity and multiple-choice scoring.
//! - [`config`] and [`cli`]: hierarchical run configuration and the `stlm` binary.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod audit;
pub mod bytepool;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generate;
pub mod model;
pub mod numerics;
pub mod tokenizer;

pub use error::{Error, Result};
