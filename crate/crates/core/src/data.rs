//! Corpus ingestion: byte-level tokenization, fixed-length blocks, and
//! deterministic contiguous train/validation/test splits.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Byte-level vocabulary: token ids are raw byte values.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corpus too short: {len} tokens < block size {t_train}")]
    TooShort { len: usize, t_train: usize },
    #[error("invalid split fractions {0:?}: must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
}

/// Identity byte mapping; lossless by construction.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fixed-length token block with split provenance.
#[derive(Debug, Clone)]
pub struct TokenBlock {
    pub tokens: Vec<u32>,
    pub split: Split,
    /// Token offset of the block start within the corpus stream.
    pub offset: usize,
}

/// A tokenized corpus plus a content digest for reproducibility.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub digest: String,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(bytes);
        Corpus { tokens: tokenize(bytes), digest: hex_digest(&h.finalize()) }
    }

    /// Concatenate files in argument order.
    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self, DataError> {
        let mut all = Vec::new();
        for p in paths {
            let bytes = fs::read(p.as_ref()).map_err(|source| DataError::Io {
                path: p.as_ref().display().to_string(),
                source,
            })?;
            all.extend_from_slice(&bytes);
        }
        Ok(Corpus::from_bytes(&all))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Segment the corpus into non-overlapping blocks of exactly `t_train`
/// tokens; the trailing remainder is dropped. Blocks start unassigned
/// (TRAIN) until `split` runs.
pub fn build_blocks(corpus: &Corpus, t_train: usize) -> Result<Vec<TokenBlock>, DataError> {
    assert!(t_train >= 1, "t_train must be >= 1");
    if corpus.len() < t_train {
        return Err(DataError::TooShort { len: corpus.len(), t_train });
    }
    let n = corpus.len() / t_train;
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        blocks.push(TokenBlock {
            tokens: corpus.tokens[i * t_train..(i + 1) * t_train].to_vec(),
            split: Split::Train,
            offset: i * t_train,
        });
    }
    Ok(blocks)
}

/// Assign splits by contiguous chunks (train, then val, then test) so no
/// block-boundary context leaks across splits. Counts are floored and the
/// remainder goes to TRAIN. The seed is part of the signature for interface
/// stability but contiguous assignment does not consume randomness.
pub fn split(
    blocks: &mut [TokenBlock],
    fractions: (f64, f64, f64),
    _seed: u64,
) -> Result<(), DataError> {
    let (ft, fv, fe) = fractions;
    let sum = ft + fv + fe;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions([ft, fv, fe]));
    }
    let n = blocks.len();
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fe).floor() as usize;
    let n_train = n - n_val - n_test;
    for (i, b) in blocks.iter_mut().enumerate() {
        b.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

/// Blocks belonging to one split.
pub fn blocks_of<'a>(blocks: &'a [TokenBlock], s: Split) -> Vec<&'a TokenBlock> {
    blocks.iter().filter(|b| b.split == s).collect()
}
