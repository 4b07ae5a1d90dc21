//! Utterance encoders: a convolutional encoder and a self-attentive
//! bidirectional recurrent encoder, both mapping token-id sequences to a
//! fixed-width representation vector. The recurrent encoder additionally
//! supports a paired attention mode that reweights its attention heads by
//! cross-utterance head similarity.

pub mod selfattn;
pub mod textcnn;

use crate::params::ParamSet;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Encoder output vector, optionally unit-normalized.
#[derive(Debug, Clone)]
pub struct Representation {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Representation {
    pub fn raw(values: Vec<f64>) -> Self {
        Representation {
            values,
            normalized: false,
        }
    }

    /// Unit-normalized copy; `None` if the vector is zero.
    pub fn normalize(&self) -> Option<Representation> {
        crate::math::l2_normalize(&self.values).map(|values| Representation {
            values,
            normalized: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    TextCnn,
    SelfAttn,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "textcnn" => Ok(EncoderKind::TextCnn),
            "selfattn" => Ok(EncoderKind::SelfAttn),
            other => Err(format!("unknown encoder {other:?} (textcnn|selfattn)")),
        }
    }
}

/// Encoder dimensions. Defaults are the production sizes; tests shrink them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub emb_dim: usize,
    /// Convolution filter widths; sequences shorter than the widest filter
    /// are zero-padded up to it.
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    /// Output dimension of both encoders.
    pub rep_dim: usize,
    /// Recurrent hidden size per direction; the bidirectional state is
    /// `2 * hidden` and must equal `rep_dim`.
    pub hidden: usize,
    /// Attention heads of the self-attentive encoder.
    pub n_heads: usize,
    /// Inner attention dimension (rows of the first attention projection).
    pub attn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            emb_dim: 300,
            filter_widths: vec![1, 2, 3],
            filters_per_width: 100,
            rep_dim: 600,
            hidden: 300,
            n_heads: 4,
            attn_dim: 300,
        }
    }
}

impl EncoderConfig {
    pub fn pooled_dim(&self) -> usize {
        self.filters_per_width * self.filter_widths.len()
    }

    pub fn validate(&self, kind: EncoderKind) {
        assert!(self.emb_dim > 0 && self.rep_dim > 0);
        match kind {
            EncoderKind::TextCnn => {
                assert!(!self.filter_widths.is_empty() && self.filters_per_width > 0);
            }
            EncoderKind::SelfAttn => {
                assert_eq!(
                    2 * self.hidden,
                    self.rep_dim,
                    "bidirectional state (2*hidden) must equal rep_dim"
                );
                assert!(self.n_heads > 0 && self.attn_dim > 0);
            }
        }
    }
}

/// Weights are drawn uniform in `±1/sqrt(fan_in)`, biases start at zero.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Register the embedding table as a (by default trainable) parameter.
pub fn init_embeddings(
    params: &mut ParamSet,
    table: &crate::data::EmbeddingTable,
) {
    params.add_with(
        "emb.table",
        vec![table.vocab_size(), table.dim],
        table.vectors.clone(),
        table.trainable,
    );
}

pub fn init_encoder(
    kind: EncoderKind,
    params: &mut ParamSet,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) {
    cfg.validate(kind);
    match kind {
        EncoderKind::TextCnn => textcnn::init(params, cfg, rng),
        EncoderKind::SelfAttn => selfattn::init(params, cfg, rng),
    }
}
