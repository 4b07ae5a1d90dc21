//! Corpus loading, vocabularies, low-resource subsetting, and the
//! frequency-quintile partition of the label set.

mod embeddings;

pub use embeddings::EmbeddingTable;

use crate::error::DataError;
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

/// Token vocabulary. Index 0 is the unknown token; once built, a vocabulary
/// is never extended — unseen tokens map to [`Vocab::UNK`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const UNK: u32 = 0;

    fn new() -> Self {
        let mut v = Vocab {
            tokens: vec!["<unk>".to_string()],
            index: HashMap::new(),
        };
        v.index.insert("<unk>".to_string(), 0);
        v
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }
}

/// Label-string to class-id mapping. Ids are assigned by first appearance in
/// the training file; later splits may extend it (a label seen only at test
/// time gets a fresh id whose training count is zero).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.names.len();
        self.names.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Tokenized utterances with integer labels plus the per-class frequency
/// table of this corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub split: Split,
}

/// Tokenization is lowercasing plus whitespace splitting; it is idempotent
/// and deterministic.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Corpus {
    fn from_rows(rows: Vec<Utterance>, num_classes: usize, split: Split) -> Self {
        let mut class_counts = vec![0usize; num_classes];
        for u in &rows {
            class_counts[u.label] += 1;
        }
        Corpus {
            utterances: rows,
            num_classes,
            class_counts,
            split,
        }
    }

    /// Load a training TSV (`utterance<TAB>label`), building the vocabulary
    /// and label map from scratch.
    pub fn load_train(path: &Path) -> Result<(Corpus, Vocab, LabelMap), DataError> {
        let mut vocab = Vocab::new();
        let mut labels = LabelMap::new();
        let corpus = load_tsv(path, Some(&mut vocab), None, &mut labels, Split::Train)?;
        Ok((corpus, vocab, labels))
    }

    /// Load a dev/test TSV against an existing vocabulary (never extended;
    /// unknown tokens map to the unk id) and label map (extended if the file
    /// mentions labels absent from training).
    pub fn load_with(
        path: &Path,
        vocab: &Vocab,
        labels: &mut LabelMap,
        split: Split,
    ) -> Result<Corpus, DataError> {
        load_tsv(path, None, Some(vocab), labels, split)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// A class is rare iff its count in this corpus is at or below the
    /// threshold. Meaningful on the training split.
    pub fn rare_flags(&self, rare_threshold: usize) -> Vec<bool> {
        self.class_counts
            .iter()
            .map(|&c| c <= rare_threshold)
            .collect()
    }

    /// `k` subsets of exactly `size` utterances, each sampled uniformly
    /// without replacement (independently per subset). Returns the subsets
    /// together with the original row indices that produced them.
    pub fn zipf_subsets(
        &self,
        k: usize,
        size: usize,
        seed: u64,
    ) -> Result<Vec<(Corpus, Vec<usize>)>, DataError> {
        assert!(k >= 1, "subset count must be at least 1");
        if size > self.len() {
            return Err(DataError::SubsetTooLarge {
                size,
                available: self.len(),
            });
        }
        let mut rng = stream(seed, "subsets");
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let picked = rand::seq::index::sample(&mut rng, self.len(), size).into_vec();
            let rows: Vec<Utterance> = picked
                .iter()
                .map(|&i| self.utterances[i].clone())
                .collect();
            out.push((
                Corpus::from_rows(rows, self.num_classes, self.split),
                picked,
            ));
        }
        Ok(out)
    }

    /// Seed-deterministic disjoint exhaustive split; the dev side holds
    /// `round(N * dev_fraction)` rows (at least 1, at most N-1). Both sides
    /// keep their rows in original corpus order.
    pub fn split_train_dev(&self, dev_fraction: f64, seed: u64) -> (Corpus, Corpus) {
        assert!(
            dev_fraction > 0.0 && dev_fraction < 1.0,
            "dev fraction must be in (0, 1)"
        );
        let n = self.len();
        let dev_n = ((n as f64 * dev_fraction).round() as usize).clamp(1, n.saturating_sub(1));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, "split"));
        let mut dev_ix = order[..dev_n].to_vec();
        let mut train_ix = order[dev_n..].to_vec();
        dev_ix.sort_unstable();
        train_ix.sort_unstable();
        let take = |ix: &[usize], split| {
            Corpus::from_rows(
                ix.iter().map(|&i| self.utterances[i].clone()).collect(),
                self.num_classes,
                split,
            )
        };
        (take(&train_ix, Split::Train), take(&dev_ix, Split::Dev))
    }
}

fn load_tsv(
    path: &Path,
    mut build_vocab: Option<&mut Vocab>,
    fixed_vocab: Option<&Vocab>,
    labels: &mut LabelMap,
    split: Split,
) -> Result<Corpus, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        let line_no = ix + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let tokens = tokenize(fields[0]);
        if tokens.is_empty() {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                line: line_no,
                reason: "empty utterance".to_string(),
            });
        }
        let token_ids: Vec<u32> = match (&mut build_vocab, fixed_vocab) {
            (Some(v), _) => tokens.iter().map(|t| v.intern(t)).collect(),
            (None, Some(v)) => tokens.iter().map(|t| v.lookup(t)).collect(),
            (None, None) => unreachable!("loader needs a vocabulary source"),
        };
        let label = labels.intern(fields[1]);
        rows.push(Utterance {
            tokens: token_ids,
            label,
        });
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(Corpus::from_rows(rows, labels.len(), split))
}

/// Classes grouped into five buckets by ascending training frequency.
/// Quintile 1 is the rarest fifth; when the class count is not divisible by
/// five, the lower (rarer) quintiles take the extra classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuintilePartition {
    /// Per class-id, a value in `1..=5`.
    pub quintile_of_class: Vec<u8>,
    /// Fraction of training-data mass per quintile; sums to 1.
    pub mass_per_quintile: [f64; 5],
}

impl QuintilePartition {
    pub fn classes_in(&self, quintile: u8) -> Vec<usize> {
        self.quintile_of_class
            .iter()
            .enumerate()
            .filter(|(_, &q)| q == quintile)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Partition the classes of a training corpus into frequency quintiles.
/// Frequency ties break by ascending class-id.
pub fn quintiles(corpus: &Corpus) -> Result<QuintilePartition, DataError> {
    let c = corpus.num_classes;
    if c < 5 {
        return Err(DataError::TooFewClasses { classes: c });
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by_key(|&id| (corpus.class_counts[id], id));

    let base = c / 5;
    let rem = c % 5;
    let mut quintile_of_class = vec![0u8; c];
    let mut counts = [0usize; 5];
    let mut cursor = 0;
    for (q, count) in counts.iter_mut().enumerate() {
        let size = base + usize::from(q < rem);
        for &class in &order[cursor..cursor + size] {
            quintile_of_class[class] = (q + 1) as u8;
        }
        *count = size;
        cursor += size;
    }

    let total: usize = corpus.class_counts.iter().sum();
    let mut mass = [0.0f64; 5];
    for (class, &q) in quintile_of_class.iter().enumerate() {
        mass[(q - 1) as usize] += corpus.class_counts[class] as f64 / total as f64;
    }
    Ok(QuintilePartition {
        quintile_of_class,
        mass_per_quintile: mass,
    })
}

/// Build a corpus directly from token-id rows; used by tests and by callers
/// that already hold tokenized data.
pub fn corpus_from_parts(rows: Vec<(Vec<u32>, usize)>, num_classes: usize, split: Split) -> Corpus {
    let rows = rows
        .into_iter()
        .map(|(tokens, label)| Utterance { tokens, label })
        .collect();
    Corpus::from_rows(rows, num_classes, split)
}

/// Seeded helper shared by loaders that must invent vectors for tokens with
/// no pretrained row.
pub(crate) fn uniform_row(rng: &mut impl Rng, dim: usize, bound: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect()
}
