//! Minimal decoder-only transformer: weights, forward pass, perplexity,
//! calibration statistics and throughput measurement.
//!
//! Blocks are pre-norm (RMSNorm with learned scale), use multi-head causal
//! attention without positional encoding and a gate-free SiLU feed-forward
//! layer. The output head is tied to the token embedding.

mod bench;
mod corpus;
mod forward;
mod io;
mod model;
mod tensor;

use thiserror::Error;

pub use bench::{benchmark_throughput, ThroughputReport};
pub use corpus::TokenCorpus;
pub use forward::{ActivationObserver, ActivationStats, LayerStats, PerplexityReport, RMS_EPS};
pub use io::{from_bytes, load_model, save_model, to_bytes, MAGIC};
pub use model::{init_random_model, Block, LayerDims, Model, ModelSpec};
pub use tensor::Matrix;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("token {token} at position {position} outside vocabulary of {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab_size: usize,
    },
    #[error("sequence length {len} outside [1, {max}] (windows need at least 2)")]
    SequenceLength { len: usize, max: usize },
    #[error("corpus of {len} tokens is shorter than one window of {seq_len}")]
    CorpusTooShort { len: usize, seq_len: usize },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("bad magic")]
    BadMagic,
    #[error("file truncated while reading tensor {0}")]
    Truncated(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} trailing bytes after final tensor")]
    TrailingData(usize),
    #[error("benchmark: {0}")]
    Benchmark(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
