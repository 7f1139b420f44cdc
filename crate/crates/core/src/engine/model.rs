use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use super::EngineError;
use crate::scalar::Scalar;

/// Architecture of the dense (unpruned) model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelSpec {
    /// Builds a spec, deriving `head_dim = d_model / n_heads`.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self, EngineError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(EngineError::InvalidSpec(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let spec = Self {
            n_layers,
            d_model,
            n_heads,
            head_dim: d_model / n_heads,
            d_ff,
            vocab_size,
            max_seq_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(EngineError::InvalidSpec(format!("{name} must be positive")));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(EngineError::InvalidSpec(format!(
                "n_heads {} x head_dim {} != d_model {}",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        Ok(())
    }

    /// Prunable projection weights of one dense block.
    pub fn dense_block_params(&self) -> usize {
        4 * self.d_model * self.n_heads * self.head_dim + 2 * self.d_model * self.d_ff
    }

    /// Whole-model parameter count of the dense model (tied output head).
    pub fn dense_total_params(&self) -> usize {
        self.n_layers * (self.dense_block_params() + 2 * self.d_model)
            + self.vocab_size * self.d_model
            + self.d_model
    }
}

/// Live width of one block after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub heads: usize,
    pub ffn_channels: usize,
}

/// One pre-norm transformer block. Head `h` owns columns
/// `h*head_dim..(h+1)*head_dim` of the Q/K/V projections and the matching
/// rows of the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Scalar> Block<T> {
    pub fn heads(&self, head_dim: usize) -> usize {
        self.wq.cols() / head_dim
    }

    pub fn ffn_channels(&self) -> usize {
        self.w_up.cols()
    }

    pub fn projection_params(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len() + self.wo.len() + self.w_up.len() + self.w_down.len()
    }
}

/// Decoder-only transformer with an output head tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub embedding: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Vec<T>,
}

impl<T: Scalar> Model<T> {
    pub fn layer_dims(&self) -> Vec<LayerDims> {
        self.blocks
            .iter()
            .map(|b| LayerDims {
                heads: b.heads(self.spec.head_dim),
                ffn_channels: b.ffn_channels(),
            })
            .collect()
    }

    /// Projection weights inside transformer blocks; the quantity pruning rates act on.
    pub fn block_param_count(&self) -> usize {
        self.blocks.iter().map(Block::projection_params).sum()
    }

    /// Every stored parameter, counting the tied head once.
    pub fn total_param_count(&self) -> usize {
        let norms: usize = self
            .blocks
            .iter()
            .map(|b| b.attn_norm.len() + b.ffn_norm.len())
            .sum();
        self.block_param_count() + norms + self.embedding.len() + self.final_norm.len()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.final_norm.iter().all(|v| v.is_finite())
            && self.blocks.iter().all(|b| {
                b.attn_norm.iter().chain(&b.ffn_norm).all(|v| v.is_finite())
                    && [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down]
                        .iter()
                        .all(|m| m.is_finite())
            })
    }

    /// Shape consistency of every tensor against the spec and live dims.
    pub fn check_shapes(&self) -> Result<(), EngineError> {
        self.spec.validate()?;
        let s = &self.spec;
        let mismatch = |what: String| Err(EngineError::Dimension(what));
        if self.blocks.len() != s.n_layers {
            return mismatch(format!(
                "spec has {} layers, model holds {}",
                s.n_layers,
                self.blocks.len()
            ));
        }
        if self.embedding.rows() != s.vocab_size || self.embedding.cols() != s.d_model {
            return mismatch("embedding".into());
        }
        if self.final_norm.len() != s.d_model {
            return mismatch("final_norm".into());
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let width = b.wq.cols();
            if width % s.head_dim != 0 || width / s.head_dim > s.n_heads {
                return mismatch(format!("layers.{l}.wq"));
            }
            let ff = b.w_up.cols();
            if ff > s.d_ff {
                return mismatch(format!("layers.{l}.w_up"));
            }
            let checks = [
                ("attn_norm", b.attn_norm.len() == s.d_model),
                ("ffn_norm", b.ffn_norm.len() == s.d_model),
                ("wq", b.wq.rows() == s.d_model),
                ("wk", b.wk.rows() == s.d_model && b.wk.cols() == width),
                ("wv", b.wv.rows() == s.d_model && b.wv.cols() == width),
                ("wo", b.wo.rows() == width && b.wo.cols() == s.d_model),
                ("w_up", b.w_up.rows() == s.d_model),
                ("w_down", b.w_down.rows() == ff && b.w_down.cols() == s.d_model),
            ];
            if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
                return mismatch(format!("layers.{l}.{name}"));
            }
        }
        Ok(())
    }
}

/// Deterministic random model: Gaussian weights with standard deviation
/// `1/sqrt(d_model)` and unit normalization scales.
///
/// Samples are drawn as `f32`, so the `f32` and `f64` models for one seed hold
/// identical values.
pub fn init_random_model<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<Model<T>, EngineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (spec.d_model as f64).sqrt();
    let mut sample = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f32_lossless((z * scale) as f32)
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let width = spec.n_heads * spec.head_dim;
    let embedding = sample(spec.vocab_size, spec.d_model);
    let blocks = (0..spec.n_layers)
        .map(|_| Block {
            attn_norm: vec![T::one(); spec.d_model],
            wq: sample(spec.d_model, width),
            wk: sample(spec.d_model, width),
            wv: sample(spec.d_model, width),
            wo: sample(width, spec.d_model),
            ffn_norm: vec![T::one(); spec.d_model],
            w_up: sample(spec.d_model, spec.d_ff),
            w_down: sample(spec.d_ff, spec.d_model),
        })
        .collect();
    Ok(Model {
        spec,
        embedding,
        blocks,
        final_norm: vec![T::one(); spec.d_model],
    })
}
