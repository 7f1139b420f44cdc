use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EngineError;

/// Pre-tokenized text used for fitness, calibration or reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    name: String,
    vocab_size: usize,
    tokens: Vec<u32>,
}

impl TokenCorpus {
    pub fn new(name: impl Into<String>, vocab_size: usize, tokens: Vec<u32>) -> Result<Self, EngineError> {
        if tokens.is_empty() {
            return Err(EngineError::Corpus("corpus is empty".into()));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= vocab_size) {
            return Err(EngineError::Corpus(format!(
                "token {} at position {pos} outside vocabulary of {vocab_size}",
                tokens[pos]
            )));
        }
        Ok(Self {
            name: name.into(),
            vocab_size,
            tokens,
        })
    }

    /// Seeded pseudo-language: each token has a handful of preferred
    /// successors that are followed most of the time.
    pub fn synthetic(
        name: impl Into<String>,
        vocab_size: usize,
        len: usize,
        seed: u64,
    ) -> Result<Self, EngineError> {
        const SUCCESSORS: usize = 4;
        const FOLLOW_PROB: f64 = 0.8;
        if vocab_size == 0 {
            return Err(EngineError::Corpus("vocabulary must be non-empty".into()));
        }
        let vocab = vocab_size as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<[u32; SUCCESSORS]> = (0..vocab_size)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..vocab)))
            .collect();
        let mut tokens = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..vocab);
        for _ in 0..len {
            tokens.push(cur);
            cur = if rng.random_bool(FOLLOW_PROB) {
                table[cur as usize][rng.random_range(0..SUCCESSORS)]
            } else {
                rng.random_range(0..vocab)
            };
        }
        Self::new(name, vocab_size, tokens)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The sidecar header that accompanies a corpus binary.
    pub fn header_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".hdr");
        PathBuf::from(s)
    }

    /// Writes little-endian u32 token ids plus a `key=value` sidecar header.
    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        let bytes: Vec<u8> = self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        fs::write(
            Self::header_path(path),
            format!("vocab_size={}\nname={}\n", self.vocab_size, self.name),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let header_path = Self::header_path(path);
        let header = fs::read_to_string(&header_path).map_err(|e| {
            EngineError::Corpus(format!("cannot read header {}: {e}", header_path.display()))
        })?;
        let mut vocab_size = None;
        let mut name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for line in header.lines() {
            match line.split_once('=') {
                Some(("vocab_size", v)) => {
                    vocab_size = Some(v.trim().parse::<usize>().map_err(|_| {
                        EngineError::Corpus(format!("bad vocab_size {v:?} in header"))
                    })?)
                }
                Some(("name", v)) => name = v.trim().to_string(),
                _ => {}
            }
        }
        let vocab_size =
            vocab_size.ok_or_else(|| EngineError::Corpus("header lacks vocab_size".into()))?;
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(EngineError::Corpus(format!(
                "{} bytes is not a whole number of u32 tokens",
                bytes.len()
            )));
        }
        let tokens = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(name, vocab_size, tokens)
    }
}
