use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::EngineError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Median tokens per second across repeats.
    pub tokens_per_sec: f64,
    pub samples: Vec<f64>,
    pub block_params: usize,
    pub total_params: usize,
}

/// Times full forward passes over `n_tokens` probe tokens, split into
/// windows of at most `max_seq_len`.
pub fn benchmark_throughput<T: Scalar>(
    model: &Model<T>,
    n_tokens: usize,
    repeats: usize,
) -> Result<ThroughputReport, EngineError> {
    if n_tokens == 0 || repeats < 3 {
        return Err(EngineError::Benchmark(format!(
            "need n_tokens >= 1 and repeats >= 3, got {n_tokens} and {repeats}"
        )));
    }
    let vocab = model.spec.vocab_size as u64;
    let probe: Vec<u32> = (0..n_tokens as u64)
        .map(|i| ((i * 2_654_435_761) % vocab) as u32)
        .collect();
    let window = model.spec.max_seq_len;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for chunk in probe.chunks(window) {
            std::hint::black_box(model.logits(chunk)?);
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        samples.push(n_tokens as f64 / secs);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(ThroughputReport {
        tokens_per_sec: median,
        samples,
        block_params: model.block_param_count(),
        total_params: model.total_param_count(),
    })
}
