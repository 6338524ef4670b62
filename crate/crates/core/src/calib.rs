//! Token streams and calibration-window sampling.
//!
//! Two on-disk formats are read: little-endian `u32` ids (`binary_u32`) and
//! raw bytes mapped one-to-one onto ids `0..256` (`text_bytes`).

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default calibration budget in tokens.
pub const DEFAULT_BUDGET: usize = 1 << 18;

#[derive(Debug, thiserror::Error)]
pub enum CalibError {
    #[error("token file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("binary token file length {0} is not a multiple of 4")]
    MalformedLength(usize),
    #[error("token id {id} at position {position} exceeds vocabulary of {vocab}")]
    IdExceedsVocab { id: u32, position: usize, vocab: usize },
    #[error("budget of {budget} tokens exceeds the {available} available")]
    BudgetExceedsData { budget: usize, available: usize },
    #[error("sequence length {seq_len} is invalid for a stream of {len} tokens")]
    InvalidSeqLen { seq_len: usize, len: usize },
    #[error("token stream is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFormat {
    #[default]
    BinaryU32,
    TextBytes,
}

impl FromStr for TokenFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary_u32" | "bin" => Ok(Self::BinaryU32),
            "text_bytes" | "text" => Ok(Self::TextBytes),
            other => Err(format!("unknown token format `{other}`")),
        }
    }
}

impl fmt::Display for TokenFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::BinaryU32 => "binary_u32",
            Self::TextBytes => "text_bytes",
        })
    }
}

/// A validated sequence of token ids, every one below `vocab`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    vocab: usize,
    source: Option<PathBuf>,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, vocab: usize) -> Result<Self, CalibError> {
        if ids.is_empty() {
            return Err(CalibError::Empty);
        }
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= vocab) {
            return Err(CalibError::IdExceedsVocab { id, position, vocab });
        }
        Ok(Self {
            ids,
            vocab,
            source: None,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Splits into `[0, at)` and `[at, len)`, e.g. calibration and held-out parts.
    pub fn split(&self, at: usize) -> Result<(TokenStream, TokenStream), CalibError> {
        if at == 0 || at >= self.len() {
            return Err(CalibError::InvalidSeqLen {
                seq_len: at,
                len: self.len(),
            });
        }
        let part = |ids: &[u32]| TokenStream {
            ids: ids.to_vec(),
            vocab: self.vocab,
            source: self.source.clone(),
        };
        Ok((part(&self.ids[..at]), part(&self.ids[at..])))
    }

    /// Consecutive non-overlapping windows of `seq_len` tokens; a trailing
    /// partial window is dropped.
    pub fn windows(&self, seq_len: usize) -> Vec<Vec<u32>> {
        self.ids.chunks_exact(seq_len.max(1)).map(<[u32]>::to_vec).collect()
    }
}

/// Reads a token file. `vocab` bounds the ids; `text_bytes` files always
/// produce ids below 256.
pub fn load_tokens(path: impl AsRef<Path>, format: TokenFormat, vocab: usize) -> Result<TokenStream, CalibError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CalibError::FileNotFound(path.to_path_buf()),
        _ => CalibError::Io(e),
    })?;
    let ids = match format {
        TokenFormat::BinaryU32 => {
            if bytes.len() % 4 != 0 {
                return Err(CalibError::MalformedLength(bytes.len()));
            }
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        TokenFormat::TextBytes => bytes.iter().map(|&b| u32::from(b)).collect(),
    };
    let mut stream = TokenStream::new(ids, vocab)?;
    stream.source = Some(path.to_path_buf());
    Ok(stream)
}

/// Writes ids as little-endian `u32`.
pub fn save_tokens(path: impl AsRef<Path>, ids: &[u32]) -> Result<(), CalibError> {
    let bytes: Vec<u8> = ids.iter().flat_map(|id| id.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Draws `⌈budget / seq_len⌉` contiguous windows of `seq_len` tokens.
///
/// Windows sit on a grid of non-overlapping slots shifted by a seeded
/// offset; slots are chosen without replacement and returned in stream
/// order. Only when the stream holds fewer whole slots than windows are the
/// remaining windows placed at free offsets, which may overlap.
pub fn sample_calibration(
    stream: &TokenStream,
    budget: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>, CalibError> {
    let len = stream.len();
    if seq_len < 2 || seq_len > len {
        return Err(CalibError::InvalidSeqLen { seq_len, len });
    }
    if budget == 0 || budget > len {
        return Err(CalibError::BudgetExceedsData {
            budget,
            available: len,
        });
    }
    let n_windows = budget.div_ceil(seq_len);
    let slots = len / seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = rng.random_range(0..=len - slots * seq_len);

    let mut offsets: Vec<usize> = if n_windows <= slots {
        let mut picked = index::sample(&mut rng, slots, n_windows).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|s| shift + s * seq_len).collect()
    } else {
        let mut all: Vec<usize> = (0..slots).map(|s| shift + s * seq_len).collect();
        all.extend((slots..n_windows).map(|_| rng.random_range(0..=len - seq_len)));
        all
    };
    offsets.sort_unstable();
    Ok(offsets
        .into_iter()
        .map(|o| stream.ids[o..o + seq_len].to_vec())
        .collect())
}

/// Seeded synthetic text: a sparse first-order Markov chain in which each
/// token has a handful of likely successors, so a model that fits it reaches
/// perplexity well below the vocabulary size.
pub fn synthetic_stream(len: usize, vocab: usize, seed: u64) -> Result<TokenStream, CalibError> {
    if len == 0 || vocab == 0 {
        return Err(CalibError::Empty);
    }
    const FANOUT: usize = 4;
    const NOISE: f64 = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successors: Vec<[u32; FANOUT]> = (0..vocab)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..vocab as u32)))
        .collect();
    let mut ids = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..vocab as u32);
    for _ in 0..len {
        ids.push(cur);
        cur = if rng.random::<f64>() < NOISE {
            rng.random_range(0..vocab as u32)
        } else {
            successors[cur as usize][rng.random_range(0..FANOUT)]
        };
    }
    TokenStream::new(ids, vocab)
}
