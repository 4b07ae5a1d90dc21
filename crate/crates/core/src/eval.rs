//! Test-time scoring: exact per-class 1-nearest-neighbor search over the
//! training representations, score normalization and gamma-fusion with the
//! classifier, and classification metrics (accuracy, macro-F1 restricted to
//! test-present classes, per-quintile F1).

use crate::data::{Corpus, QuintilePartition};
use crate::error::EvalError;
use crate::math;
use crate::model::Model;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const NN_EPSILON: f64 = 1e-8;

/// How raw scores are turned into probability-like vectors before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionNorm {
    /// L1 for inverse distances, softmax for classifier scores.
    #[default]
    L1Softmax,
    /// Softmax for both.
    SoftmaxSoftmax,
}

impl std::str::FromStr for FusionNorm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l1_softmax" => Ok(FusionNorm::L1Softmax),
            "softmax_softmax" => Ok(FusionNorm::SoftmaxSoftmax),
            other => Err(format!(
                "unknown fusion norm {other:?} (l1_softmax|softmax_softmax)"
            )),
        }
    }
}

/// Exact linear-scan index: per class, the unit-normalized training
/// representations under one parameter snapshot.
pub struct RepIndex {
    pub by_class: Vec<Vec<Vec<f64>>>,
    pub epsilon: f64,
}

impl RepIndex {
    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn total_members(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }
}

/// Raw single-path representations of a whole corpus, in corpus order.
pub fn encode_corpus(model: &Model, corpus: &Corpus) -> Result<Vec<Vec<f64>>, EvalError> {
    Ok(corpus
        .utterances
        .par_iter()
        .map(|u| model.encode_value(&u.tokens))
        .collect::<Result<_, _>>()?)
}

/// Encode every training utterance with the single-utterance path and store
/// it, unit-normalized, under its class.
pub fn build_index(model: &Model, train: &Corpus) -> Result<RepIndex, EvalError> {
    let reps = encode_corpus(model, train)?;
    index_from_reps(train, &reps)
}

/// Build the index from precomputed raw representations (corpus order).
pub fn index_from_reps(train: &Corpus, reps: &[Vec<f64>]) -> Result<RepIndex, EvalError> {
    assert_eq!(reps.len(), train.len());
    let num_classes = train
        .utterances
        .iter()
        .map(|u| u.label + 1)
        .max()
        .unwrap_or(0)
        .max(train.num_classes);
    let mut by_class = vec![Vec::new(); num_classes];
    for (u, rep) in train.utterances.iter().zip(reps) {
        let unit = math::l2_normalize(rep).ok_or(crate::tensor::TensorError::ZeroNorm)?;
        by_class[u.label].push(unit);
    }
    Ok(RepIndex {
        by_class,
        epsilon: NN_EPSILON,
    })
}

/// Per-class inverse distance to the nearest member: `1 / (ε + min_d)`,
/// zero for classes with no training members. `r_unit` must be normalized.
pub fn nn_scores(index: &RepIndex, r_unit: &[f64]) -> Vec<f64> {
    index
        .by_class
        .iter()
        .map(|members| {
            let mut best: Option<f64> = None;
            for m in members {
                let d2: f64 = m
                    .iter()
                    .zip(r_unit)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                best = Some(match best {
                    Some(b) if b <= d2 => b,
                    _ => d2,
                });
            }
            match best {
                Some(d2) => 1.0 / (index.epsilon + d2.sqrt()),
                None => 0.0,
            }
        })
        .collect()
}

/// Normalized NN scores, classifier distribution, and their interpolation.
#[derive(Debug, Clone, Serialize)]
pub struct FusedScores {
    pub c_nn: Vec<f64>,
    pub c_class: Vec<f64>,
    pub c_final: Vec<f64>,
    pub gamma: f64,
}

/// `c_final = γ·c̄_nn + (1−γ)·c̄_class` after normalizing each side.
pub fn fuse(
    nn_raw: &[f64],
    class_raw: &[f64],
    gamma: f64,
    norm: FusionNorm,
) -> Result<FusedScores, EvalError> {
    assert!((0.0..=1.0).contains(&gamma), "gamma must be in [0, 1]");
    assert_eq!(nn_raw.len(), class_raw.len());
    let total: f64 = nn_raw.iter().sum();
    if total <= 0.0 {
        return Err(EvalError::EmptyIndex);
    }
    let c_nn = match norm {
        FusionNorm::L1Softmax => nn_raw.iter().map(|v| v / total).collect::<Vec<f64>>(),
        FusionNorm::SoftmaxSoftmax => math::softmax(nn_raw),
    };
    let c_class = math::softmax(class_raw);
    let c_final = c_nn
        .iter()
        .zip(&c_class)
        .map(|(n, c)| gamma * n + (1.0 - gamma) * c)
        .collect();
    Ok(FusedScores {
        c_nn,
        c_class,
        c_final,
        gamma,
    })
}

/// Fused prediction for one token sequence; argmax ties go to the lowest
/// class id.
pub fn predict(
    model: &Model,
    index: &RepIndex,
    tokens: &[u32],
    gamma: f64,
    norm: FusionNorm,
) -> Result<usize, EvalError> {
    let rep = model.encode_value(tokens)?;
    let unit = math::l2_normalize(&rep).ok_or(crate::tensor::TensorError::ZeroNorm)?;
    let nn = nn_scores(index, &unit);
    let cls = model.classify_value(&rep)?;
    let fused = fuse(&nn, &cls, gamma, norm)?;
    Ok(math::argmax(&fused.c_final))
}

/// Raw per-utterance scores for a whole corpus, computed once so that a
/// gamma grid can be swept cheaply.
pub struct ScoredCorpus {
    pub gold: Vec<usize>,
    pub nn_raw: Vec<Vec<f64>>,
    pub cls_raw: Vec<Vec<f64>>,
}

pub fn score_corpus(
    model: &Model,
    index: &RepIndex,
    corpus: &Corpus,
) -> Result<ScoredCorpus, EvalError> {
    let scored: Vec<(Vec<f64>, Vec<f64>)> = corpus
        .utterances
        .par_iter()
        .map(|u| -> Result<_, EvalError> {
            let rep = model.encode_value(&u.tokens)?;
            let unit = math::l2_normalize(&rep).ok_or(crate::tensor::TensorError::ZeroNorm)?;
            let nn = nn_scores(index, &unit);
            let cls = model.classify_value(&rep)?;
            Ok((nn, cls))
        })
        .collect::<Result<_, _>>()?;
    let (nn_raw, cls_raw) = scored.into_iter().unzip();
    Ok(ScoredCorpus {
        gold: corpus.utterances.iter().map(|u| u.label).collect(),
        nn_raw,
        cls_raw,
    })
}

impl ScoredCorpus {
    pub fn fused_predictions(
        &self,
        gamma: f64,
        norm: FusionNorm,
    ) -> Result<Vec<usize>, EvalError> {
        self.nn_raw
            .iter()
            .zip(&self.cls_raw)
            .map(|(nn, cls)| Ok(math::argmax(&fuse(nn, cls, gamma, norm)?.c_final)))
            .collect()
    }

    pub fn classifier_predictions(&self) -> Vec<usize> {
        self.cls_raw.iter().map(|cls| math::argmax(cls)).collect()
    }
}

/// Classifier-only predictions for a corpus (the cross-entropy baseline's
/// inference rule; no index involved).
pub fn classifier_predictions(model: &Model, corpus: &Corpus) -> Result<Vec<usize>, EvalError> {
    corpus
        .utterances
        .par_iter()
        .map(|u| -> Result<usize, EvalError> {
            let rep = model.encode_value(&u.tokens)?;
            Ok(math::argmax(&model.classify_value(&rep)?))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean per-class F1 over classes present in the evaluated split.
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Macro-F1 restricted to each training-frequency quintile; `None` when
    /// a quintile has no class present in the split.
    pub quintile_f1: [Option<f64>; 5],
    pub gamma: Option<f64>,
    pub num_test_classes: usize,
}

/// Confusion-count metrics. Per-class F1 is `2tp / (2tp + fp + fn)` (zero
/// when that denominator is zero); macro-F1 averages only classes that occur
/// in `gold`. Quintile membership comes from the training distribution, so
/// classes outside the partition (seen only at test time) count toward
/// macro-F1 but no quintile.
pub fn metrics_from_predictions(
    gold: &[usize],
    pred: &[usize],
    num_classes: usize,
    quintiles: Option<&QuintilePartition>,
    gamma: Option<f64>,
) -> EvalReport {
    assert_eq!(gold.len(), pred.len());
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            correct += 1;
            tp[g] += 1;
        } else {
            fn_[g] += 1;
            fp[p] += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();

    let present: Vec<bool> = {
        let mut p = vec![false; num_classes];
        for &g in gold {
            p[g] = true;
        }
        p
    };
    let present_classes: Vec<usize> = (0..num_classes).filter(|&c| present[c]).collect();
    let macro_f1 = present_classes
        .iter()
        .map(|&c| per_class_f1[c])
        .sum::<f64>()
        / present_classes.len() as f64;

    let mut quintile_f1 = [None; 5];
    if let Some(part) = quintiles {
        for q in 1..=5u8 {
            let classes: Vec<usize> = present_classes
                .iter()
                .copied()
                .filter(|&c| {
                    c < part.quintile_of_class.len() && part.quintile_of_class[c] == q
                })
                .collect();
            if !classes.is_empty() {
                quintile_f1[(q - 1) as usize] = Some(
                    classes.iter().map(|&c| per_class_f1[c]).sum::<f64>() / classes.len() as f64,
                );
            }
        }
    }

    EvalReport {
        accuracy: correct as f64 / gold.len() as f64,
        macro_f1,
        per_class_f1,
        quintile_f1,
        gamma,
        num_test_classes: present_classes.len(),
    }
}

/// Full fused evaluation of a test corpus at a fixed gamma.
pub fn evaluate(
    model: &Model,
    index: &RepIndex,
    test: &Corpus,
    quintiles: Option<&QuintilePartition>,
    gamma: f64,
    norm: FusionNorm,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let scored = score_corpus(model, index, test)?;
    let pred = scored.fused_predictions(gamma, norm)?;
    Ok(metrics_from_predictions(
        &scored.gold,
        &pred,
        test.num_classes.max(model.num_classes),
        quintiles,
        Some(gamma),
    ))
}

/// Pick the grid gamma maximizing dev macro-F1; ties go to the smaller
/// gamma. Returns the winning gamma with its dev report.
pub fn tune_gamma(
    scored_dev: &ScoredCorpus,
    num_classes: usize,
    grid: &[f64],
    norm: FusionNorm,
) -> Result<(f64, EvalReport), EvalError> {
    assert!(!grid.is_empty(), "gamma grid must be non-empty");
    let mut best: Option<(f64, EvalReport)> = None;
    for &gamma in grid {
        let pred = scored_dev.fused_predictions(gamma, norm)?;
        let report =
            metrics_from_predictions(&scored_dev.gold, &pred, num_classes, None, Some(gamma));
        let better = match &best {
            None => true,
            Some((_, b)) => report.macro_f1 > b.macro_f1,
        };
        if better {
            best = Some((gamma, report));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// The default tuning grid {0.0, 0.1, ..., 1.0}.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}
