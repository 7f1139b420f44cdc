//! Causal forward pass, perplexity and calibration statistics.

use serde::{Deserialize, Serialize};

use super::corpus::TokenCorpus;
use super::model::{Block, Model};
use super::tensor::Matrix;
use super::EngineError;
use crate::scalar::Scalar;

pub const RMS_EPS: f64 = 1e-5;

/// Receives the inputs that reach each weight matrix during a forward pass.
pub trait ActivationObserver<T> {
    fn attn_input(&mut self, _layer: usize, _x: &Matrix<T>) {}
    fn ffn_input(&mut self, _layer: usize, _x: &Matrix<T>) {}
    fn ffn_mid(&mut self, _layer: usize, _x: &Matrix<T>) {}
}

struct NoObserver;
impl<T> ActivationObserver<T> for NoObserver {}

fn rms_norm<T: Scalar>(x: &Matrix<T>, scale: &[T]) -> Matrix<T> {
    let eps = T::of(RMS_EPS);
    let d = T::of(x.cols() as f64);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut ss = T::zero();
        for &v in row {
            ss += v * v;
        }
        let inv = T::one() / (ss / d + eps).sqrt();
        for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(scale) {
            *o = v * inv * g;
        }
    }
    out
}

#[inline]
fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

fn add_in_place<T: Scalar>(x: &mut Matrix<T>, delta: &Matrix<T>) {
    for (a, &b) in x.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *a += b;
    }
}

fn attention<T: Scalar>(block: &Block<T>, h: &Matrix<T>, head_dim: usize) -> Matrix<T> {
    let q = h.matmul(&block.wq);
    let k = h.matmul(&block.wk);
    let v = h.matmul(&block.wv);
    let len = h.rows();
    let heads = block.wq.cols() / head_dim;
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let mut out = Matrix::zeros(len, q.cols());
    let mut weights = vec![T::zero(); len];
    for head in 0..heads {
        let cols = head * head_dim..(head + 1) * head_dim;
        for t in 0..len {
            let qt = &q.row(t)[cols.clone()];
            let mut max = T::neg_infinity();
            for s in 0..=t {
                let ks = &k.row(s)[cols.clone()];
                let mut dot = T::zero();
                for (&a, &b) in qt.iter().zip(ks) {
                    dot += a * b;
                }
                weights[s] = dot * scale;
                max = max.max(weights[s]);
            }
            let mut total = T::zero();
            for w in &mut weights[..=t] {
                *w = (*w - max).exp();
                total += *w;
            }
            let dst = &mut out.row_mut(t)[cols.clone()];
            for s in 0..=t {
                let p = weights[s] / total;
                for (o, &vv) in dst.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    out.matmul(&block.wo)
}

impl<T: Scalar> Model<T> {
    fn check_tokens(&self, tokens: &[u32]) -> Result<(), EngineError> {
        if tokens.is_empty() || tokens.len() > self.spec.max_seq_len {
            return Err(EngineError::SequenceLength {
                len: tokens.len(),
                max: self.spec.max_seq_len,
            });
        }
        if let Some(position) = tokens
            .iter()
            .position(|&t| t as usize >= self.spec.vocab_size)
        {
            return Err(EngineError::TokenOutOfRange {
                position,
                token: tokens[position],
                vocab_size: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    fn forward(&self, tokens: &[u32], obs: &mut dyn ActivationObserver<T>) -> Matrix<T> {
        let d = self.spec.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(self.embedding.row(tok as usize));
        }
        for (l, block) in self.blocks.iter().enumerate() {
            let h = rms_norm(&x, &block.attn_norm);
            obs.attn_input(l, &h);
            if block.wq.cols() > 0 {
                let delta = attention(block, &h, self.spec.head_dim);
                add_in_place(&mut x, &delta);
            }
            let h = rms_norm(&x, &block.ffn_norm);
            obs.ffn_input(l, &h);
            let mut mid = h.matmul(&block.w_up);
            for v in mid.as_mut_slice() {
                *v = silu(*v);
            }
            obs.ffn_mid(l, &mid);
            if block.w_up.cols() > 0 {
                let delta = mid.matmul(&block.w_down);
                add_in_place(&mut x, &delta);
            }
        }
        let fin = rms_norm(&x, &self.final_norm);
        let mut logits = Matrix::zeros(tokens.len(), self.spec.vocab_size);
        for t in 0..tokens.len() {
            let src = fin.row(t);
            for (vocab, out) in logits.row_mut(t).iter_mut().enumerate() {
                let mut acc = T::zero();
                for (&a, &b) in src.iter().zip(self.embedding.row(vocab)) {
                    acc += a * b;
                }
                *out = acc;
            }
        }
        logits
    }

    /// Next-token logits for every prefix position (`len x vocab_size`).
    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix<T>, EngineError> {
        self.check_tokens(tokens)?;
        Ok(self.forward(tokens, &mut NoObserver))
    }

    /// Runs the forward pass while handing every intermediate input to `obs`.
    pub fn forward_observed(
        &self,
        tokens: &[u32],
        obs: &mut dyn ActivationObserver<T>,
    ) -> Result<Matrix<T>, EngineError> {
        self.check_tokens(tokens)?;
        Ok(self.forward(tokens, obs))
    }

    /// Summed next-token negative log-likelihood over one window.
    fn window_nll(&self, window: &[u32]) -> f64 {
        let logits = self.forward(window, &mut NoObserver);
        let mut nll = 0.0;
        for t in 0..window.len() - 1 {
            let row = logits.row(t);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
            let sum: f64 = row.iter().map(|&v| (v.as_f64() - max).exp()).sum();
            let target = row[window[t + 1] as usize].as_f64();
            nll += max + sum.ln() - target;
        }
        nll
    }

    /// Perplexity over consecutive non-overlapping windows of `seq_len` tokens.
    pub fn evaluate_perplexity(
        &self,
        corpus: &TokenCorpus,
        seq_len: usize,
    ) -> Result<PerplexityReport, EngineError> {
        let windows = windows(self, corpus, seq_len)?;
        for w in &windows {
            self.check_tokens(w)?;
        }
        // Sorting the per-window sums makes the total independent of window order.
        let mut sums: Vec<f64> = windows.iter().map(|w| self.window_nll(w)).collect();
        sums.sort_by(f64::total_cmp);
        let total: f64 = sums.iter().sum();
        let tokens_evaluated = windows.len() * (seq_len - 1);
        Ok(PerplexityReport {
            perplexity: (total / tokens_evaluated as f64).exp(),
            tokens_evaluated,
            windows: windows.len(),
        })
    }

    pub fn perplexity(&self, corpus: &TokenCorpus, seq_len: usize) -> Result<f64, EngineError> {
        Ok(self.evaluate_perplexity(corpus, seq_len)?.perplexity)
    }

    /// Channel-wise l2 norms of the inputs to every weight matrix, gathered
    /// over the calibration windows.
    pub fn collect_activation_stats(
        &self,
        calib: &TokenCorpus,
        seq_len: usize,
    ) -> Result<ActivationStats<T>, EngineError> {
        let windows = windows(self, calib, seq_len)?;
        let mut acc = SumSquares::new(self);
        for w in &windows {
            self.check_tokens(w)?;
            self.forward(w, &mut acc);
        }
        Ok(acc.finish(windows.len() * seq_len))
    }
}

fn windows<'a, T: Scalar>(
    model: &Model<T>,
    corpus: &'a TokenCorpus,
    seq_len: usize,
) -> Result<Vec<&'a [u32]>, EngineError> {
    if seq_len < 2 || seq_len > model.spec.max_seq_len {
        return Err(EngineError::SequenceLength {
            len: seq_len,
            max: model.spec.max_seq_len,
        });
    }
    if corpus.vocab_size() > model.spec.vocab_size {
        return Err(EngineError::Corpus(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            model.spec.vocab_size
        )));
    }
    let tokens = corpus.tokens();
    if tokens.len() < seq_len {
        return Err(EngineError::CorpusTooShort {
            len: tokens.len(),
            seq_len,
        });
    }
    Ok(tokens.chunks_exact(seq_len).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub tokens_evaluated: usize,
    pub windows: usize,
}

/// Per-layer input-channel norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats<T> {
    /// Inputs to the Q/K/V projections (`d_model`).
    pub attn_input_norms: Vec<T>,
    /// Inputs to the FFN up projection (`d_model`).
    pub ffn_input_norms: Vec<T>,
    /// Inputs to the FFN down projection (one per live channel).
    pub ffn_mid_norms: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats<T> {
    pub layers: Vec<LayerStats<T>>,
    pub token_count: usize,
}

impl<T: Scalar> ActivationStats<T> {
    /// Multiplies every norm by `c`.
    pub fn scaled(&self, c: T) -> Self {
        let s = |v: &Vec<T>| v.iter().map(|&x| x * c).collect();
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerStats {
                    attn_input_norms: s(&l.attn_input_norms),
                    ffn_input_norms: s(&l.ffn_input_norms),
                    ffn_mid_norms: s(&l.ffn_mid_norms),
                })
                .collect(),
            token_count: self.token_count,
        }
    }
}

struct SumSquares {
    attn: Vec<Vec<f64>>,
    ffn_in: Vec<Vec<f64>>,
    ffn_mid: Vec<Vec<f64>>,
}

impl SumSquares {
    fn new<T: Scalar>(model: &Model<T>) -> Self {
        let d = model.spec.d_model;
        let l = model.blocks.len();
        Self {
            attn: vec![vec![0.0; d]; l],
            ffn_in: vec![vec![0.0; d]; l],
            ffn_mid: model.blocks.iter().map(|b| vec![0.0; b.w_up.cols()]).collect(),
        }
    }

    fn accumulate<T: Scalar>(dst: &mut [f64], x: &Matrix<T>) {
        for r in 0..x.rows() {
            for (d, &v) in dst.iter_mut().zip(x.row(r)) {
                let v = v.as_f64();
                *d += v * v;
            }
        }
    }

    fn finish<T: Scalar>(self, token_count: usize) -> ActivationStats<T> {
        let root = |v: Vec<f64>| v.into_iter().map(|s| T::of(s.sqrt())).collect();
        let layers = self
            .attn
            .into_iter()
            .zip(self.ffn_in)
            .zip(self.ffn_mid)
            .map(|((a, f), m)| LayerStats {
                attn_input_norms: root(a),
                ffn_input_norms: root(f),
                ffn_mid_norms: root(m),
            })
            .collect();
        ActivationStats { layers, token_count }
    }
}

impl<T: Scalar> ActivationObserver<T> for SumSquares {
    fn attn_input(&mut self, layer: usize, x: &Matrix<T>) {
        Self::accumulate(&mut self.attn[layer], x);
    }
    fn ffn_input(&mut self, layer: usize, x: &Matrix<T>) {
        Self::accumulate(&mut self.ffn_in[layer], x);
    }
    fn ffn_mid(&mut self, layer: usize, x: &Matrix<T>) {
        Self::accumulate(&mut self.ffn_mid[layer], x);
    }
}
