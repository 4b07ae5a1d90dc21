//! Pretrained word-embedding table keyed by vocabulary id.

use super::{uniform_row, Vocab};
use crate::error::DataError;
use crate::rng::stream;
use std::fs;
use std::path::Path;

pub const EMBEDDING_DIM: usize = 300;
const INIT_BOUND: f64 = 0.25;

/// `V x dim` embedding matrix, one row per vocabulary token. Tokens missing
/// from the pretrained file (always including the unk row) are initialized
/// uniformly in `[-0.25, 0.25]` from the run seed.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub trainable: bool,
    pub unk_index: u32,
}

impl EmbeddingTable {
    /// Load from a text file of `token v1 ... v300` lines. Only rows for
    /// in-vocabulary tokens are kept.
    pub fn load(path: &Path, vocab: &Vocab, seed: u64) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut pretrained: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
        for (ix, line) in text.lines().enumerate() {
            let line_no = ix + 1;
            let mut fields = line.split_whitespace();
            let token = fields.next().ok_or_else(|| DataError::Format {
                path: path.to_path_buf(),
                line: line_no,
                reason: "empty line".to_string(),
            })?;
            let values: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| DataError::Format {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: format!("unparseable float {f:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if values.len() != EMBEDDING_DIM {
                return Err(DataError::Format {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!(
                        "expected {} fields (token + {EMBEDDING_DIM} floats), found {}",
                        EMBEDDING_DIM + 1,
                        values.len() + 1
                    ),
                });
            }
            let id = vocab.lookup(token);
            if id != Vocab::UNK || token == vocab.token(Vocab::UNK) {
                pretrained[id as usize] = Some(values);
            }
        }
        Ok(Self::assemble(pretrained, EMBEDDING_DIM, seed))
    }

    /// All-random table for runs without a pretrained file.
    pub fn seeded_random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        Self::assemble(vec![None; vocab_size], dim, seed)
    }

    fn assemble(pretrained: Vec<Option<Vec<f64>>>, dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "emb");
        let mut vectors = Vec::with_capacity(pretrained.len() * dim);
        for row in pretrained {
            match row {
                Some(v) => vectors.extend_from_slice(&v),
                None => vectors.extend_from_slice(&uniform_row(&mut rng, dim, INIT_BOUND)),
            }
        }
        EmbeddingTable {
            dim,
            vectors,
            trainable: true,
            unk_index: Vocab::UNK,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let ix = id as usize * self.dim;
        &self.vectors[ix..ix + self.dim]
    }
}
