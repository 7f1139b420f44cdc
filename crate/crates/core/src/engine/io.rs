//! `SPRN1` weight container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"SPRN1"
//! u32 x 7   n_layers d_model n_heads head_dim d_ff vocab_size max_seq_len
//! u32 x 2   live heads, live ffn channels       (once per layer)
//! f32 ...   embedding                           vocab_size x d_model
//!           per layer: attn_norm wq wk wv wo ffn_norm w_up w_down
//!           final_norm
//! ```
//!
//! Matrices are row-major; Q/K/V are `d_model x heads*head_dim`, the output
//! projection `heads*head_dim x d_model`, `w_up` is `d_model x ffn` and
//! `w_down` is `ffn x d_model`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::model::{Block, LayerDims, Model, ModelSpec};
use super::tensor::Matrix;
use super::EngineError;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 5] = b"SPRN1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_floats<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    for &v in data {
        out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
}

/// Serializes a model into `SPRN1` bytes.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let s = &model.spec;
    let mut out = Vec::with_capacity(64 + 4 * model.total_param_count());
    out.extend_from_slice(MAGIC);
    for v in [
        s.n_layers,
        s.d_model,
        s.n_heads,
        s.head_dim,
        s.d_ff,
        s.vocab_size,
        s.max_seq_len,
    ] {
        put_u32(&mut out, v);
    }
    for dims in model.layer_dims() {
        put_u32(&mut out, dims.heads);
        put_u32(&mut out, dims.ffn_channels);
    }
    put_floats(&mut out, model.embedding.as_slice());
    for b in &model.blocks {
        put_floats(&mut out, &b.attn_norm);
        for m in [&b.wq, &b.wk, &b.wv, &b.wo] {
            put_floats(&mut out, m.as_slice());
        }
        put_floats(&mut out, &b.ffn_norm);
        put_floats(&mut out, b.w_up.as_slice());
        put_floats(&mut out, b.w_down.as_slice());
    }
    put_floats(&mut out, &model.final_norm);
    out
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), EngineError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    src: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], EngineError> {
        if self.src.len() < n {
            return Err(EngineError::Truncated(what.to_string()));
        }
        let (head, tail) = self.src.split_at(n);
        self.src = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<usize, EngineError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn floats<T: Scalar>(&mut self, count: usize, what: &str) -> Result<Vec<T>, EngineError> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| EngineError::Dimension(format!("{what} is too large")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| T::from_f32_lossless(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix<T>, EngineError> {
        Ok(Matrix::from_vec(rows, cols, self.floats(rows * cols, what)?))
    }
}

/// Parses `SPRN1` bytes. Errors name the tensor that could not be read.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>, EngineError> {
    let mut r = Reader { src: bytes };
    if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
        return Err(EngineError::BadMagic);
    }
    let mut field = |name: &str| r.u32(&format!("header.{name}"));
    let spec = ModelSpec {
        n_layers: field("n_layers")?,
        d_model: field("d_model")?,
        n_heads: field("n_heads")?,
        head_dim: field("head_dim")?,
        d_ff: field("d_ff")?,
        vocab_size: field("vocab_size")?,
        max_seq_len: field("max_seq_len")?,
    };
    spec.validate()?;
    let mut dims = Vec::with_capacity(spec.n_layers.min(1 << 16));
    for l in 0..spec.n_layers {
        let heads = r.u32(&format!("header.layers.{l}.heads"))?;
        let ffn_channels = r.u32(&format!("header.layers.{l}.ffn_channels"))?;
        if heads > spec.n_heads || ffn_channels > spec.d_ff {
            return Err(EngineError::Dimension(format!(
                "layer {l} declares {heads} heads / {ffn_channels} channels, above spec"
            )));
        }
        dims.push(LayerDims { heads, ffn_channels });
    }
    let d = spec.d_model;
    let embedding = r.matrix(spec.vocab_size, d, "embedding")?;
    let mut blocks = Vec::with_capacity(dims.len());
    for (l, dim) in dims.iter().enumerate() {
        let w = dim.heads * spec.head_dim;
        let ff = dim.ffn_channels;
        let name = |t: &str| format!("layers.{l}.{t}");
        blocks.push(Block {
            attn_norm: r.floats(d, &name("attn_norm"))?,
            wq: r.matrix(d, w, &name("wq"))?,
            wk: r.matrix(d, w, &name("wk"))?,
            wv: r.matrix(d, w, &name("wv"))?,
            wo: r.matrix(w, d, &name("wo"))?,
            ffn_norm: r.floats(d, &name("ffn_norm"))?,
            w_up: r.matrix(d, ff, &name("w_up"))?,
            w_down: r.matrix(ff, d, &name("w_down"))?,
        });
    }
    let final_norm = r.floats(d, "final_norm")?;
    if !r.src.is_empty() {
        return Err(EngineError::TrailingData(r.src.len()));
    }
    Ok(Model {
        spec,
        embedding,
        blocks,
        final_norm,
    })
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>, EngineError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e: io::Error| EngineError::Io(e))?;
    from_bytes(&bytes)
}
