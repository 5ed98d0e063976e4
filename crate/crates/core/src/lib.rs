//! Encoder-decoder transformer with attention links: each layer may add the
//! previous layer's pre-softmax attention logits (same head) to its own
//! before the softmax. λ = 0 recovers the plain transformer exactly, and the
//! link adds no parameters.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: `f64` tensors and reverse-mode autodiff
//! - [`attention`]: (linked) self/cross attention and the feed-forward block
//! - [`params`], [`model`]: parameter layout, initialization, full forward pass
//! - [`train`]: label-smoothed loss, Adam, warmup schedule, training loop
//! - [`data`]: synthetic tasks, TSV corpora, vocabularies, subsampling
//! - [`eval`]: greedy decoding, BLEU, attention entropy and dumps
//! - [`theory`]: Monte Carlo check of the noise-averaging argument, λ = 0 witness
//! - [`cli`]: the `attnlink` command line

pub mod attention;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod tensor;
pub mod theory;
pub mod train;

pub use config::{LinkPlacement, LinkSource, ModelConfig};
pub use error::{Error, Result};
pub use params::ModelParams;
pub use tensor::{Graph, Tensor, Var};
