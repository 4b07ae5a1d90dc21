//! Pairwise training objective: margin contrastive loss on normalized
//! representations, representation-level mixup with a KL loss against the
//! interpolated label, and their convex combination.

use crate::model::{Model, ModelIds};
use crate::tensor::{Tape, TensorError, TensorId};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Positive margin: same-class pairs are only pulled when farther apart.
    pub m_pos: f64,
    /// Negative margin: different-class pairs are only pushed while closer.
    pub m_neg: f64,
    /// Weight of the contrastive term; `1 - beta` weights the mixup term.
    pub beta: f64,
    /// Beta-distribution concentration for pairs touching a rare class.
    pub alpha_rare: f64,
    /// Concentration for frequent-only pairs; values below 1 are folded so
    /// the interpolation stays close to the first element.
    pub alpha_freq: f64,
    /// A class is rare iff its training count is at or below this.
    pub rare_threshold: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            m_pos: 0.8,
            m_neg: 1.2,
            beta: 0.5,
            alpha_rare: 20.0,
            alpha_freq: 0.05,
            rare_threshold: 10,
        }
    }
}

/// Draw the interpolation weight for a pair. Returns `(lambda, alpha_used)`.
///
/// The rare concentration applies when either side of the pair is rare.
/// On the frequent branch with `alpha < 1`, the draw is folded to
/// `max(lambda, 1 - lambda)`: the raw symmetric-bimodal draw would land near
/// 0 half the time, and frequent pairs are meant to stay close to the
/// original example.
pub fn sample_lambda(
    rare_i: bool,
    rare_j: bool,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let rare = rare_i || rare_j;
    let alpha = if rare { cfg.alpha_rare } else { cfg.alpha_freq };
    let dist = Beta::new(alpha, alpha).expect("alpha must be positive and finite");
    let mut lambda: f64 = dist.sample(rng);
    if !rare && alpha < 1.0 {
        lambda = lambda.max(1.0 - lambda);
    }
    (lambda, alpha)
}

/// Mixup of two in-graph representations plus their one-hot labels.
pub struct MixupSample {
    pub r_mix: TensorId,
    pub y_mix: Vec<f64>,
    pub lambda: f64,
}

pub fn mixup<'p>(
    tape: &mut Tape<'p>,
    r_i: TensorId,
    r_j: TensorId,
    y_i: usize,
    y_j: usize,
    num_classes: usize,
    lambda: f64,
) -> Result<MixupSample, TensorError> {
    assert!((0.0..=1.0).contains(&lambda), "lambda must be in [0, 1]");
    let r_mix = tape.affine(r_i, r_j, lambda, 1.0 - lambda)?;
    let mut y_mix = vec![0.0; num_classes];
    if y_i == y_j {
        y_mix[y_i] = 1.0;
    } else {
        y_mix[y_i] = lambda;
        y_mix[y_j] = 1.0 - lambda;
    }
    Ok(MixupSample {
        r_mix,
        y_mix,
        lambda,
    })
}

/// Margin contrastive loss over internally normalized representations:
/// `½·y·max(0, D−m_pos)² + ½·(1−y)·max(0, m_neg−D)²` where `D` is the
/// Euclidean distance between the unit-normalized vectors.
pub fn contrastive_loss<'p>(
    tape: &mut Tape<'p>,
    r_i: TensorId,
    r_j: TensorId,
    same_class: bool,
    cfg: &LossConfig,
) -> Result<TensorId, TensorError> {
    let n_i = tape.l2_normalize(r_i)?;
    let n_j = tape.l2_normalize(r_j)?;
    let d2 = tape.sq_dist(n_i, n_j)?;
    let d = tape.sqrt(d2)?;
    let margin = tape.scalar(if same_class { cfg.m_pos } else { cfg.m_neg });
    let gap = if same_class {
        tape.affine(d, margin, 1.0, -1.0)? // D - m_pos
    } else {
        tape.affine(margin, d, 1.0, -1.0)? // m_neg - D
    };
    let hinge = tape.relu(gap)?;
    let sq = tape.mul(hinge, hinge)?;
    tape.scale(sq, 0.5)
}

/// `KL(y_mix ‖ softmax(c_mix))` with the `0·log 0 = 0` convention. Gradient
/// flows through the scores only; the label entropy enters as a constant so
/// the reported value is the true divergence.
pub fn mixup_loss<'p>(
    tape: &mut Tape<'p>,
    c_mix: TensorId,
    y_mix: &[f64],
) -> Result<TensorId, TensorError> {
    let log_probs = tape.log_softmax(c_mix)?;
    let y = tape.constant(y_mix.to_vec(), vec![y_mix.len()]);
    let weighted = tape.mul(y, log_probs)?;
    let cross = tape.sum(weighted)?;
    let neg_cross = tape.scale(cross, -1.0)?;
    let entropy: f64 = y_mix
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    let entropy_term = tape.scalar(entropy);
    tape.add(neg_cross, entropy_term)
}

/// One pair of a training batch, with its interpolation weight already drawn.
#[derive(Debug, Clone)]
pub struct PairExample<'a> {
    pub tokens_i: &'a [u32],
    pub tokens_j: &'a [u32],
    pub y_i: usize,
    pub y_j: usize,
    pub lambda: f64,
}

impl PairExample<'_> {
    pub fn same_class(&self) -> bool {
        self.y_i == self.y_j
    }
}

/// Sum over the batch of `β·L_con + (1−β)·L_mix`, all on one tape. The
/// caller divides by the full batch size (possibly after merging chunk
/// tapes) to obtain the batch mean. Contrastive gradients reach the encoder
/// only; mixup gradients reach encoder and classifier.
pub fn pair_batch_loss_sum<'p>(
    tape: &mut Tape<'p>,
    model: &Model,
    ids: &ModelIds,
    examples: &[PairExample<'_>],
    cfg: &LossConfig,
) -> Result<TensorId, TensorError> {
    assert!(
        (0.0..=1.0).contains(&cfg.beta),
        "beta must be in [0, 1]"
    );
    let mut con_terms = Vec::with_capacity(examples.len());
    let mut mix_terms = Vec::with_capacity(examples.len());
    for ex in examples {
        let (r_i, r_j) = model.encode_pair(tape, ids, ex.tokens_i, ex.tokens_j)?;
        con_terms.push(contrastive_loss(tape, r_i, r_j, ex.same_class(), cfg)?);
        let sample = mixup(tape, r_i, r_j, ex.y_i, ex.y_j, model.num_classes, ex.lambda)?;
        let scores = model.classify(tape, ids, sample.r_mix)?;
        mix_terms.push(mixup_loss(tape, scores, &sample.y_mix)?);
    }
    let con_cat = tape.concat0(&con_terms)?;
    let con_sum = tape.sum(con_cat)?;
    let mix_cat = tape.concat0(&mix_terms)?;
    let mix_sum = tape.sum(mix_cat)?;
    tape.affine(con_sum, mix_sum, cfg.beta, 1.0 - cfg.beta)
}

/// Batch mean of the pairwise objective on a single tape; the micro-batch
/// entry point used by tests and gradient checks.
pub fn pair_batch_loss_mean<'p>(
    tape: &mut Tape<'p>,
    model: &Model,
    ids: &ModelIds,
    examples: &[PairExample<'_>],
    cfg: &LossConfig,
) -> Result<TensorId, TensorError> {
    let total = pair_batch_loss_sum(tape, model, ids, examples, cfg)?;
    tape.scale(total, 1.0 / examples.len() as f64)
}
