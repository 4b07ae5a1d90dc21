//! Command-line surface. Every hyperparameter flag is optional; values
//! resolve as defaults, then `--config` file, then explicit flags.

use crate::config::PartialConfig;
use clap::{Args, Parser, Subcommand};
use pairlearn::encoders::EncoderKind;
use pairlearn::eval::FusionNorm;
use pairlearn::trainer::TrainMode;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "pairlearn",
    about = "Pairwise contrastive + mixup training for imbalanced utterance classification",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic Zipf-imbalanced token-pattern corpus
    Synth(SynthArgs),
    /// Inspect a corpus: stats, quintiles, optional low-resource subsets
    Prepare(PrepareArgs),
    /// Train a model and retain the best-dev-macro-F1 checkpoint
    Train(TrainArgs),
    /// Evaluate a trained run directory on a test corpus
    Eval(EvalArgs),
    /// Train the ablation matrix and compare the rows on the test split
    Ablate(TrainArgs),
}

#[derive(Args, Debug)]
pub struct HyperArgs {
    /// Training corpus TSV (utterance<TAB>label)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Test corpus TSV; for `train` this triggers a final evaluation
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Pretrained embedding file (token + 300 floats per line)
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Weight of the contrastive term in [0, 1]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Comma-separated fusion weights searched on dev, e.g. "0.0,0.5,1.0"
    #[arg(long)]
    pub gamma_grid: Option<GammaGrid>,
    #[arg(long)]
    pub alpha_rare: Option<f64>,
    #[arg(long)]
    pub alpha_freq: Option<f64>,
    #[arg(long)]
    pub rare_threshold: Option<usize>,
    #[arg(long)]
    pub pos_pool: Option<usize>,
    #[arg(long)]
    pub neg_pool: Option<usize>,
    #[arg(long)]
    pub mined_pos: Option<usize>,
    #[arg(long)]
    pub mined_neg: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dev_fraction: Option<f64>,
    /// Embedding dimension for randomly initialized tables (pretrained
    /// files are always 300)
    #[arg(long)]
    pub emb_dim: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub attn_dim: Option<usize>,
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// Disable the paired second-order attention (head averages are used
    /// on both sides during training)
    #[arg(long)]
    pub no_second_order: bool,
    /// Global-norm gradient clip
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub fusion_norm: Option<FusionNorm>,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Newtype so the comma list parses as one argument value.
#[derive(Clone, Debug)]
pub struct GammaGrid(pub Vec<f64>);

impl std::str::FromStr for GammaGrid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let grid: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        if grid.is_empty() || grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err("gamma grid values must lie in [0, 1]".to_string());
        }
        Ok(GammaGrid(grid))
    }
}

impl HyperArgs {
    pub fn to_partial(&self) -> PartialConfig {
        PartialConfig {
            corpus: self.corpus.clone(),
            test: self.test.clone(),
            embeddings: self.embeddings.clone(),
            encoder: self.encoder,
            mode: self.mode,
            beta: self.beta,
            gamma_grid: self.gamma_grid.clone().map(|g| g.0),
            alpha_rare: self.alpha_rare,
            alpha_freq: self.alpha_freq,
            rare_threshold: self.rare_threshold,
            pos_pool: self.pos_pool,
            neg_pool: self.neg_pool,
            mined_pos: self.mined_pos,
            mined_neg: self.mined_neg,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            dev_fraction: self.dev_fraction,
            emb_dim: self.emb_dim,
            n_heads: self.n_heads,
            attn_dim: self.attn_dim,
            freeze_embeddings: if self.freeze_embeddings {
                Some(true)
            } else {
                None
            },
            second_order: if self.no_second_order {
                Some(false)
            } else {
                None
            },
            grad_clip: self.grad_clip,
            fusion_norm: self.fusion_norm,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output directory for checkpoint, logs, and resolved config
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-utterance predictions for the test split
    #[arg(long)]
    pub dump_predictions: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub classes: usize,
    #[arg(long, default_value_t = 3000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf_exponent: f64,
    #[arg(long, default_value_t = 13)]
    pub sig_alphabet: usize,
    #[arg(long, default_value_t = 2)]
    pub surface_modes: usize,
    #[arg(long, default_value_t = 150)]
    pub noise_tokens: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.12)]
    pub distractor_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Emit this many low-resource subsets sampled without replacement
    #[arg(long)]
    pub subsets: Option<usize>,
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory produced by `train` (checkpoint, vocab, labels, config)
    #[arg(long)]
    pub model: PathBuf,
    /// Test corpus TSV
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Training corpus for the index; defaults to the path recorded in the
    /// run config
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    /// Fusion weight override; defaults to the checkpoint's tuned value
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Output directory; defaults to the model directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dump_predictions: bool,
}
