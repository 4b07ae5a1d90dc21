//! Run configuration: defaults, optional JSON config file, flag overrides,
//! and the fully resolved copy written next to every run's outputs.

use pairlearn::encoders::EncoderKind;
use pairlearn::eval::FusionNorm;
use pairlearn::trainer::TrainMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Every knob of a training/ablation run with concrete values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub mode: TrainMode,
    pub beta: f64,
    pub gamma_grid: Vec<f64>,
    pub alpha_rare: f64,
    pub alpha_freq: f64,
    pub rare_threshold: usize,
    pub pos_pool: usize,
    pub neg_pool: usize,
    pub mined_pos: usize,
    pub mined_neg: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub emb_dim: usize,
    pub n_heads: usize,
    pub attn_dim: usize,
    pub freeze_embeddings: bool,
    pub second_order: bool,
    pub grad_clip: Option<f64>,
    pub fusion_norm: FusionNorm,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = pairlearn::losses::LossConfig::default();
        let pools = pairlearn::pairing::PoolConfig::default();
        let train = pairlearn::trainer::TrainConfig::default();
        RunConfig {
            corpus: None,
            test: None,
            embeddings: None,
            encoder: EncoderKind::TextCnn,
            mode: TrainMode::Pairwise,
            beta: loss.beta,
            gamma_grid: train.gamma_grid.clone(),
            alpha_rare: loss.alpha_rare,
            alpha_freq: loss.alpha_freq,
            rare_threshold: loss.rare_threshold,
            pos_pool: pools.positive_pool,
            neg_pool: pools.negative_pool,
            mined_pos: pools.mined_positive,
            mined_neg: pools.mined_negative,
            epochs: train.epochs,
            lr: train.learning_rate,
            batch_size: train.batch_size,
            seed: 0,
            dev_fraction: 0.1,
            emb_dim: 300,
            n_heads: 4,
            attn_dim: 300,
            freeze_embeddings: false,
            second_order: true,
            grad_clip: None,
            fusion_norm: FusionNorm::default(),
        }
    }
}

/// The same fields, all optional: the shape of a config file and of the
/// flag overrides. Resolution order is defaults, then file, then flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub corpus: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub encoder: Option<EncoderKind>,
    pub mode: Option<TrainMode>,
    pub beta: Option<f64>,
    pub gamma_grid: Option<Vec<f64>>,
    pub alpha_rare: Option<f64>,
    pub alpha_freq: Option<f64>,
    pub rare_threshold: Option<usize>,
    pub pos_pool: Option<usize>,
    pub neg_pool: Option<usize>,
    pub mined_pos: Option<usize>,
    pub mined_neg: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub dev_fraction: Option<f64>,
    pub emb_dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub attn_dim: Option<usize>,
    pub freeze_embeddings: Option<bool>,
    pub second_order: Option<bool>,
    pub grad_clip: Option<f64>,
    pub fusion_norm: Option<FusionNorm>,
}

macro_rules! overlay {
    ($base:ident, $part:ident, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $part.$field { $base.$field = v; })+
    };
}

impl RunConfig {
    pub fn overlay(&mut self, part: PartialConfig) {
        let base = self;
        overlay!(
            base, part, encoder, mode, beta, gamma_grid, alpha_rare, alpha_freq, rare_threshold,
            pos_pool, neg_pool, mined_pos, mined_neg, epochs, lr, batch_size, seed, dev_fraction,
            emb_dim, n_heads, attn_dim, freeze_embeddings, second_order, fusion_norm,
        );
        if part.corpus.is_some() {
            base.corpus = part.corpus;
        }
        if part.test.is_some() {
            base.test = part.test;
        }
        if part.embeddings.is_some() {
            base.embeddings = part.embeddings;
        }
        if part.grad_clip.is_some() {
            base.grad_clip = part.grad_clip;
        }
    }

    pub fn loss_config(&self) -> pairlearn::losses::LossConfig {
        pairlearn::losses::LossConfig {
            beta: self.beta,
            alpha_rare: self.alpha_rare,
            alpha_freq: self.alpha_freq,
            rare_threshold: self.rare_threshold,
            ..pairlearn::losses::LossConfig::default()
        }
    }

    pub fn pool_config(&self) -> pairlearn::pairing::PoolConfig {
        pairlearn::pairing::PoolConfig {
            positive_pool: self.pos_pool,
            negative_pool: self.neg_pool,
            mined_positive: self.mined_pos,
            mined_negative: self.mined_neg,
        }
    }

    pub fn train_config(&self) -> pairlearn::trainer::TrainConfig {
        pairlearn::trainer::TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            mode: self.mode,
            grad_clip: self.grad_clip,
            gamma_grid: self.gamma_grid.clone(),
            fusion_norm: self.fusion_norm,
            ..pairlearn::trainer::TrainConfig::default()
        }
    }

    pub fn encoder_config(&self) -> pairlearn::encoders::EncoderConfig {
        pairlearn::encoders::EncoderConfig {
            emb_dim: self.emb_dim,
            n_heads: self.n_heads,
            attn_dim: self.attn_dim,
            ..pairlearn::encoders::EncoderConfig::default()
        }
    }
}

/// The self-describing record written into every artifact directory:
/// command, resolved configuration, and content hashes of the inputs.
#[derive(Debug, Serialize)]
pub struct ResolvedRun<'a> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub input_hashes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(format!("sha256:{:x}", Sha256::digest(&bytes)))
}
