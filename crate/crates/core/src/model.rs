//! A trainable model: embedding table, encoder, and classifier head behind
//! one named parameter set, plus the graph-building entry points the trainer
//! and inference paths share.

use crate::classifier::{self, ClassifierConfig, ClassifierIds};
use crate::data::EmbeddingTable;
use crate::encoders::{
    self, selfattn, selfattn::SelfAttnIds, textcnn, textcnn::TextCnnIds, EncoderConfig,
    EncoderKind,
};
use crate::params::{BoundParams, ParamSet};
use crate::rng::stream;
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: EncoderKind,
    pub enc_cfg: EncoderConfig,
    pub cls_cfg: ClassifierConfig,
    pub num_classes: usize,
    /// Whether paired encoding reweights attention heads across the pair.
    /// Only meaningful for the self-attentive encoder; switching it off is
    /// the head-average ablation.
    pub second_order: bool,
    pub params: ParamSet,
}

/// Per-tape parameter bindings for one model.
pub struct ModelIds {
    pub bound: BoundParams,
    cnn: Option<TextCnnIds>,
    attn: Option<SelfAttnIds>,
    cls: ClassifierIds,
}

impl ModelIds {
    /// Bindings over externally created leaf tensors aligned with the
    /// parameter-set order (gradient-check harness entry point).
    pub fn from_leaves(model: &Model, ids: &[TensorId]) -> ModelIds {
        model.ids_from(BoundParams::from_ids(&model.params, ids))
    }
}

impl Model {
    pub fn new(
        kind: EncoderKind,
        enc_cfg: EncoderConfig,
        cls_cfg: ClassifierConfig,
        embeddings: &EmbeddingTable,
        num_classes: usize,
        seed: u64,
    ) -> Model {
        assert_eq!(
            embeddings.dim, enc_cfg.emb_dim,
            "embedding table dimension must match the encoder config"
        );
        let mut params = ParamSet::new();
        let mut rng = stream(seed, "init");
        encoders::init_embeddings(&mut params, embeddings);
        encoders::init_encoder(kind, &mut params, &enc_cfg, &mut rng);
        classifier::init(&mut params, &cls_cfg, enc_cfg.rep_dim, num_classes, &mut rng);
        Model {
            kind,
            enc_cfg,
            cls_cfg,
            num_classes,
            second_order: true,
            params,
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> ModelIds {
        self.ids_from(BoundParams::bind(tape, &self.params))
    }

    fn ids_from(&self, bound: BoundParams) -> ModelIds {
        let (cnn, attn) = match self.kind {
            EncoderKind::TextCnn => (
                Some(TextCnnIds::resolve(&self.params, &bound, &self.enc_cfg)),
                None,
            ),
            EncoderKind::SelfAttn => (
                None,
                Some(SelfAttnIds::resolve(&self.params, &bound, &self.enc_cfg)),
            ),
        };
        let cls = ClassifierIds::resolve(&self.params, &bound);
        ModelIds {
            bound,
            cnn,
            attn,
            cls,
        }
    }

    /// Single-utterance encoding: the convolutional path directly, or the
    /// head average of the self-attentive path.
    pub fn encode_single<'p>(
        &self,
        tape: &mut Tape<'p>,
        ids: &ModelIds,
        tokens: &[u32],
    ) -> Result<TensorId, TensorError> {
        match self.kind {
            EncoderKind::TextCnn => {
                textcnn::encode(tape, ids.cnn.as_ref().expect("cnn ids"), &self.enc_cfg, tokens)
            }
            EncoderKind::SelfAttn => {
                let m = selfattn::encode_heads(
                    tape,
                    ids.attn.as_ref().expect("attn ids"),
                    &self.enc_cfg,
                    tokens,
                )?;
                selfattn::head_average(tape, m)
            }
        }
    }

    /// Paired encoding used during pairwise training.
    pub fn encode_pair<'p>(
        &self,
        tape: &mut Tape<'p>,
        ids: &ModelIds,
        tokens_i: &[u32],
        tokens_j: &[u32],
    ) -> Result<(TensorId, TensorId), TensorError> {
        match self.kind {
            EncoderKind::TextCnn => Ok((
                self.encode_single(tape, ids, tokens_i)?,
                self.encode_single(tape, ids, tokens_j)?,
            )),
            EncoderKind::SelfAttn => {
                let attn = ids.attn.as_ref().expect("attn ids");
                let m_i = selfattn::encode_heads(tape, attn, &self.enc_cfg, tokens_i)?;
                let m_j = selfattn::encode_heads(tape, attn, &self.enc_cfg, tokens_j)?;
                if self.second_order {
                    let (r_i, r_j, _s) =
                        selfattn::second_order_attention(tape, m_i, m_j, attn.second_order_w)?;
                    Ok((r_i, r_j))
                } else {
                    Ok((
                        selfattn::head_average(tape, m_i)?,
                        selfattn::head_average(tape, m_j)?,
                    ))
                }
            }
        }
    }

    pub fn classify<'p>(
        &self,
        tape: &mut Tape<'p>,
        ids: &ModelIds,
        rep: TensorId,
    ) -> Result<TensorId, TensorError> {
        classifier::classify(tape, &ids.cls, rep)
    }

    /// Forward-only single-utterance encoding to plain values.
    pub fn encode_value(&self, tokens: &[u32]) -> Result<Vec<f64>, TensorError> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape);
        let r = self.encode_single(&mut tape, &ids, tokens)?;
        Ok(tape.value(r).to_vec())
    }

    /// Forward-only classifier scores for a plain representation.
    pub fn classify_value(&self, rep: &[f64]) -> Result<Vec<f64>, TensorError> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape);
        let r = tape.constant(rep.to_vec(), vec![rep.len()]);
        let c = self.classify(&mut tape, &ids, r)?;
        Ok(tape.value(c).to_vec())
    }
}
