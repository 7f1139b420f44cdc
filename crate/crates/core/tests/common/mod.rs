#![allow(dead_code)]

//! Straight-line reference implementations used as oracles.
//!
//! Nothing here calls into the engine's math: weights are read element by
//! element and every quantity is computed with plain f64 loops.

pub mod stub;

use layerprune::engine::{init_random_model, Model, ModelSpec, TokenCorpus};
use layerprune::Scalar;

pub fn spec(layers: usize, d: usize, heads: usize, ff: usize, vocab: usize, max_seq: usize) -> ModelSpec {
    ModelSpec::new(layers, d, heads, ff, vocab, max_seq).unwrap()
}

pub fn toy_model(seed: u64) -> Model<f32> {
    init_random_model(spec(2, 16, 4, 24, 32, 32), seed).unwrap()
}

pub fn corpus(vocab: usize, len: usize, seed: u64) -> TokenCorpus {
    TokenCorpus::synthetic("t", vocab, len, seed).unwrap()
}

fn w<T: Scalar>(m: &layerprune::engine::Matrix<T>, r: usize, c: usize) -> f64 {
    m.get(r, c).as_f64()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
}

fn to64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Per-position input vectors seen by each weight group, for stats checks.
#[derive(Default, Clone)]
pub struct Trace {
    pub attn_in: Vec<Vec<Vec<f64>>>,
    pub ffn_in: Vec<Vec<Vec<f64>>>,
    pub ffn_mid: Vec<Vec<Vec<f64>>>,
}

/// Logits (`len x vocab`) for one window, plus the activations that fed
/// each projection.
pub fn oracle_forward<T: Scalar>(m: &Model<T>, tokens: &[u32]) -> (Vec<Vec<f64>>, Trace) {
    let d = m.spec.d_model;
    let hd = m.spec.head_dim;
    let len = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| (0..d).map(|j| w(&m.embedding, t as usize, j)).collect())
        .collect();
    let mut trace = Trace::default();
    for b in &m.blocks {
        let g = to64(&b.attn_norm);
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &g)).collect();
        trace.attn_in.push(h.clone());
        let heads = b.wq.cols() / hd;
        let proj = |mat: &layerprune::engine::Matrix<T>, t: usize| -> Vec<f64> {
            (0..mat.cols())
                .map(|c| (0..d).map(|i| h[t][i] * w(mat, i, c)).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = (0..len).map(|t| proj(&b.wq, t)).collect();
        let k: Vec<Vec<f64>> = (0..len).map(|t| proj(&b.wk, t)).collect();
        let v: Vec<Vec<f64>> = (0..len).map(|t| proj(&b.wv, t)).collect();
        for t in 0..len {
            let mut concat = vec![0.0; heads * hd];
            for head in 0..heads {
                let off = head * hd;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| (0..hd).map(|j| q[t][off + j] * k[s][off + j]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..hd {
                    concat[off + j] = (0..=t).map(|s| e[s] / z * v[s][off + j]).sum();
                }
            }
            for j in 0..d {
                x[t][j] += (0..heads * hd).map(|c| concat[c] * w(&b.wo, c, j)).sum::<f64>();
            }
        }
        let g = to64(&b.ffn_norm);
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &g)).collect();
        trace.ffn_in.push(h.clone());
        let ff = b.w_up.cols();
        let mut mids = Vec::with_capacity(len);
        for t in 0..len {
            let mid: Vec<f64> = (0..ff)
                .map(|c| {
                    let u: f64 = (0..d).map(|i| h[t][i] * w(&b.w_up, i, c)).sum();
                    u / (1.0 + (-u).exp())
                })
                .collect();
            for j in 0..d {
                x[t][j] += (0..ff).map(|c| mid[c] * w(&b.w_down, c, j)).sum::<f64>();
            }
            mids.push(mid);
        }
        trace.ffn_mid.push(mids);
    }
    let g = to64(&m.final_norm);
    let logits = x
        .iter()
        .map(|r| {
            let f = rms(r, &g);
            (0..m.spec.vocab_size)
                .map(|v| (0..d).map(|j| f[j] * w(&m.embedding, v, j)).sum())
                .collect()
        })
        .collect();
    (logits, trace)
}

/// Perplexity over non-overlapping windows, computed from oracle logits.
pub fn oracle_perplexity<T: Scalar>(m: &Model<T>, tokens: &[u32], seq_len: usize) -> f64 {
    let mut nll = 0.0;
    let mut count = 0usize;
    for win in tokens.chunks_exact(seq_len) {
        let (logits, _) = oracle_forward(m, win);
        for t in 0..seq_len - 1 {
            let row = &logits[t];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            nll += lse - row[win[t + 1] as usize];
            count += 1;
        }
    }
    (nll / count as f64).exp()
}

/// Column-wise l2 norms of a stack of per-token vectors across all windows.
pub fn column_norms(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map_or(0, |r| r.len());
    (0..n)
        .map(|c| rows.iter().map(|r| r[c] * r[c]).sum::<f64>().sqrt())
        .collect()
}

/// Importance of head `h` written out from its definition: every weight
/// that reads from or writes to the head, times the norm of the channel it
/// touches on the residual side.
pub fn oracle_head_score<T: Scalar>(m: &Model<T>, layer: usize, h: usize, attn_norms: &[f64]) -> f64 {
    let b = &m.blocks[layer];
    let hd = m.spec.head_dim;
    let mut s = 0.0;
    for c in h * hd..(h + 1) * hd {
        for (i, a) in attn_norms.iter().enumerate() {
            s += (w(&b.wq, i, c).abs() + w(&b.wk, i, c).abs() + w(&b.wv, i, c).abs()) * a;
            s += w(&b.wo, c, i).abs() * a;
        }
    }
    s
}

pub fn oracle_ffn_score<T: Scalar>(m: &Model<T>, layer: usize, k: usize, in_norms: &[f64], mid_norm: f64) -> f64 {
    let b = &m.blocks[layer];
    let mut s = 0.0;
    for (i, a) in in_norms.iter().enumerate() {
        s += w(&b.w_up, i, k).abs() * a;
    }
    for j in 0..m.spec.d_model {
        s += w(&b.w_down, k, j).abs() * mid_norm;
    }
    s
}

/// Keep-set of size `keep` with the largest total score, by enumerating
/// every subset. Returns ascending indices.
pub fn brute_force_keep(scores: &[f64], keep: usize) -> Vec<usize> {
    let n = scores.len();
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != keep {
            continue;
        }
        let total: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| scores[i]).sum();
        if best.is_none_or(|(b, _)| total > b) {
            best = Some((total, mask));
        }
    }
    let mask = best.expect("at least the empty set").1;
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}
