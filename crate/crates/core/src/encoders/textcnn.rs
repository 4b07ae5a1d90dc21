//! Convolutional sentence encoder: per-width 1-D convolutions over the
//! embedded token sequence, max-over-time pooling, and a tanh projection of
//! the concatenated poolings to the representation space.

use super::{fan_in_bound, EncoderConfig};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Tape, TensorError, TensorId};
use rand::Rng;

pub fn init(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut impl Rng) {
    for &w in &cfg.filter_widths {
        let fan = w * cfg.emb_dim;
        params.add_uniform(
            &format!("cnn.conv{w}.weight"),
            vec![cfg.filters_per_width, w, cfg.emb_dim],
            fan_in_bound(fan),
            rng,
        );
        params.add_zeros(&format!("cnn.conv{w}.bias"), vec![cfg.filters_per_width]);
    }
    params.add_uniform(
        "cnn.proj.weight",
        vec![cfg.rep_dim, cfg.pooled_dim()],
        fan_in_bound(cfg.pooled_dim()),
        rng,
    );
    params.add_zeros("cnn.proj.bias", vec![cfg.rep_dim]);
}

/// Tape ids of the encoder parameters, resolved once per tape.
pub struct TextCnnIds {
    pub emb: TensorId,
    pub conv_w: Vec<TensorId>,
    pub conv_b: Vec<TensorId>,
    pub proj_w: TensorId,
    pub proj_b: TensorId,
}

impl TextCnnIds {
    pub fn resolve(params: &ParamSet, bound: &BoundParams, cfg: &EncoderConfig) -> Self {
        TextCnnIds {
            emb: bound.id(params, "emb.table"),
            conv_w: cfg
                .filter_widths
                .iter()
                .map(|w| bound.id(params, &format!("cnn.conv{w}.weight")))
                .collect(),
            conv_b: cfg
                .filter_widths
                .iter()
                .map(|w| bound.id(params, &format!("cnn.conv{w}.bias")))
                .collect(),
            proj_w: bound.id(params, "cnn.proj.weight"),
            proj_b: bound.id(params, "cnn.proj.bias"),
        }
    }
}

/// Encode one token sequence to a `[rep_dim]` tensor. Sequences shorter than
/// the widest filter are padded with constant zero embedding rows.
pub fn encode<'p>(
    tape: &mut Tape<'p>,
    ids: &TextCnnIds,
    cfg: &EncoderConfig,
    tokens: &[u32],
) -> Result<TensorId, TensorError> {
    if tokens.is_empty() {
        return Err(TensorError::BadShape {
            op: "encode_textcnn",
            shape: vec![0],
            reason: "empty token sequence",
        });
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut rows = tape.gather_rows(ids.emb, &idx)?;
    let widest = *cfg.filter_widths.iter().max().expect("widths non-empty");
    if idx.len() < widest {
        let pad_rows = widest - idx.len();
        let pad = tape.constant(vec![0.0; pad_rows * cfg.emb_dim], vec![pad_rows, cfg.emb_dim]);
        rows = tape.concat0(&[rows, pad])?;
    }
    let mut pooled = Vec::with_capacity(cfg.filter_widths.len());
    for wi in 0..cfg.filter_widths.len() {
        let conv = tape.conv1d(rows, ids.conv_w[wi])?;
        let conv = tape.add_bias_rows(conv, ids.conv_b[wi])?;
        pooled.push(tape.max_over_time(conv)?);
    }
    let features = tape.concat0(&pooled)?;
    let z = tape.matvec(ids.proj_w, features)?;
    let z = tape.add(z, ids.proj_b)?;
    tape.tanh(z)
}
