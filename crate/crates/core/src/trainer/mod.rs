//! End-to-end training: Adam over the combined pairwise objective with
//! per-epoch hard mining and dev macro-F1 early stopping, plus a plain
//! cross-entropy baseline mode sharing the optimizer and evaluation
//! scaffolding.

mod adam;
pub mod checkpoint;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::CheckpointMeta;

use crate::data::Corpus;
use crate::error::TrainError;
use crate::eval::{
    self, classifier_predictions, metrics_from_predictions, score_corpus, tune_gamma, FusionNorm,
};
use crate::losses::{self, LossConfig, PairExample};
use crate::model::Model;
use crate::pairing::{mine_hard_pairs, MinedPair, PairPool};
use crate::rng::epoch_stream;
use crate::tensor::{Tape, TensorError, TensorId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pairwise,
    CrossEntropy,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pairwise" => Ok(TrainMode::Pairwise),
            "cross_entropy" => Ok(TrainMode::CrossEntropy),
            other => Err(format!("unknown mode {other:?} (pairwise|cross_entropy)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per step in pairwise mode, utterances per step in
    /// cross-entropy mode.
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub gamma_grid: Vec<f64>,
    pub fusion_norm: FusionNorm,
    /// Items per gradient chunk. Chunks are processed in parallel but merged
    /// in a fixed order, so results never depend on the worker count.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 15,
            batch_size: 64,
            seed: 0,
            mode: TrainMode::Pairwise,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: None,
            gamma_grid: eval::default_gamma_grid(),
            fusion_norm: FusionNorm::default(),
            grad_chunk: 8,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
    /// Fusion weight selected on dev this epoch; absent in cross-entropy
    /// mode, which has no fusion.
    pub gamma: Option<f64>,
}

/// Events emitted while training; the caller decides how to log them.
pub enum TrainEvent<'a> {
    Mining {
        epoch: usize,
        pairs: usize,
        mean_positive_distance: f64,
        mean_negative_distance: f64,
    },
    Epoch(&'a EpochRecord),
}

/// The retained best-dev-epoch snapshot.
pub struct CheckpointRecord {
    pub epoch: usize,
    pub dev_macro_f1: f64,
    pub dev_accuracy: f64,
    pub gamma: Option<f64>,
    pub params: crate::params::ParamSet,
}

pub struct TrainOutcome {
    pub best: CheckpointRecord,
    pub epochs: Vec<EpochRecord>,
}

/// Per-parameter gradient accumulator in parameter-set order.
type GradVecs = Vec<Option<Vec<f64>>>;

fn merge_grads(total: &mut GradVecs, part: GradVecs) {
    for (t, p) in total.iter_mut().zip(part) {
        match (t.as_mut(), p) {
            (_, None) => {}
            (Some(t), Some(p)) => {
                for (a, b) in t.iter_mut().zip(p) {
                    *a += b;
                }
            }
            (None, Some(p)) => *t = Some(p),
        }
    }
}

fn scale_grads(grads: &mut GradVecs, factor: f64) {
    for g in grads.iter_mut().flatten() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
}

fn clip_grads(grads: &mut GradVecs, max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        scale_grads(grads, max_norm / norm);
    }
}

/// Run one gradient chunk: build the summed loss on a fresh tape, backward,
/// and pull out (loss sum, per-parameter gradients).
fn run_chunk<F>(model: &Model, build: F) -> Result<(f64, GradVecs), TensorError>
where
    F: for<'p> FnOnce(
        &mut Tape<'p>,
        &Model,
        &crate::model::ModelIds,
    ) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let ids = model.bind(&mut tape);
    let loss = build(&mut tape, model, &ids)?;
    let value = tape.value(loss)[0];
    tape.backward(loss)?;
    let grads = ids
        .bound
        .ids()
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Train a model, re-mining pairs each epoch in pairwise mode. After every
/// epoch the dev split is scored with the mode's full inference rule
/// (gamma-tuned fusion for pairwise, classifier argmax for cross-entropy)
/// and the best-dev-macro-F1 snapshot is retained (ties keep the earlier
/// epoch).
pub fn train(
    model: &mut Model,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    pool: Option<&PairPool>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(TrainEvent),
) -> Result<TrainOutcome, TrainError> {
    assert!(cfg.epochs >= 1, "training needs at least one epoch");
    assert!(cfg.learning_rate > 0.0, "learning rate must be positive");
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = cfg.adam();
    let mut best: Option<CheckpointRecord> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    // Raw training-set representations computed by the previous epoch's dev
    // evaluation; parameters have not moved since, so the next mining pass
    // reuses them instead of re-encoding the corpus.
    let mut cached_reps: Option<Vec<Vec<f64>>> = None;

    for epoch in 0..cfg.epochs {
        let train_loss = match cfg.mode {
            TrainMode::Pairwise => {
                let pool = pool.expect("pairwise training requires sampled pools");
                pairwise_epoch(
                    model,
                    train_corpus,
                    pool,
                    cached_reps.take(),
                    loss_cfg,
                    cfg,
                    &mut adam,
                    &adam_cfg,
                    epoch,
                    sink,
                )?
            }
            TrainMode::CrossEntropy => cross_entropy_epoch(
                model,
                train_corpus,
                cfg,
                &mut adam,
                &adam_cfg,
                epoch,
            )?,
        };

        let record = match cfg.mode {
            TrainMode::Pairwise => {
                let reps = eval::encode_corpus(model, train_corpus)?;
                let index = eval::index_from_reps(train_corpus, &reps)?;
                cached_reps = Some(reps);
                let scored = score_corpus(model, &index, dev_corpus)?;
                let (gamma, report) =
                    tune_gamma(&scored, model.num_classes, &cfg.gamma_grid, cfg.fusion_norm)?;
                EpochRecord {
                    epoch,
                    train_loss,
                    dev_accuracy: report.accuracy,
                    dev_macro_f1: report.macro_f1,
                    gamma: Some(gamma),
                }
            }
            TrainMode::CrossEntropy => {
                let pred = classifier_predictions(model, dev_corpus)?;
                let gold: Vec<usize> = dev_corpus.utterances.iter().map(|u| u.label).collect();
                let report =
                    metrics_from_predictions(&gold, &pred, model.num_classes, None, None);
                EpochRecord {
                    epoch,
                    train_loss,
                    dev_accuracy: report.accuracy,
                    dev_macro_f1: report.macro_f1,
                    gamma: None,
                }
            }
        };
        sink(TrainEvent::Epoch(&record));
        let improves = best
            .as_ref()
            .map_or(true, |b| record.dev_macro_f1 > b.dev_macro_f1);
        if improves {
            best = Some(CheckpointRecord {
                epoch,
                dev_macro_f1: record.dev_macro_f1,
                dev_accuracy: record.dev_accuracy,
                gamma: record.gamma,
                params: model.params.clone(),
            });
        }
        records.push(record);
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        epochs: records,
    })
}

#[allow(clippy::too_many_arguments)]
fn pairwise_epoch(
    model: &mut Model,
    corpus: &Corpus,
    pool: &PairPool,
    cached_reps: Option<Vec<Vec<f64>>>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    epoch: usize,
    sink: &mut dyn FnMut(TrainEvent),
) -> Result<f64, TrainError> {
    let mined: Vec<MinedPair> = {
        let mut shuffle_rng = epoch_stream(cfg.seed, "mine", epoch);
        match cached_reps {
            Some(reps) => {
                mine_hard_pairs(pool, |ix| reps[ix].clone(), &mut shuffle_rng)
            }
            None => {
                let encode = |ix: usize| {
                    model
                        .encode_value(&corpus.utterances[ix].tokens)
                        .expect("mining encode failed")
                };
                mine_hard_pairs(pool, encode, &mut shuffle_rng)
            }
        }
    };
    {
        let mean = |same: bool| {
            let (sum, n) = mined
                .iter()
                .filter(|m| m.y_pair == same)
                .fold((0.0, 0usize), |(s, n), m| (s + m.d, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        };
        sink(TrainEvent::Mining {
            epoch,
            pairs: mined.len(),
            mean_positive_distance: mean(true),
            mean_negative_distance: mean(false),
        });
    }

    let rare = corpus.rare_flags(loss_cfg.rare_threshold);
    let mut lambda_rng = epoch_stream(cfg.seed, "lambda", epoch);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;

    for (batch_ix, batch) in mined.chunks(cfg.batch_size.max(1)).enumerate() {
        let examples: Vec<PairExample> = batch
            .iter()
            .map(|m| {
                let (lambda, _alpha) =
                    losses::sample_lambda(rare[m.y_i], rare[m.y_j], loss_cfg, &mut lambda_rng);
                PairExample {
                    tokens_i: &corpus.utterances[m.i].tokens,
                    tokens_j: &corpus.utterances[m.j].tokens,
                    y_i: m.y_i,
                    y_j: m.y_j,
                    lambda,
                }
            })
            .collect();

        let chunk_results: Vec<Result<(f64, GradVecs), TensorError>> = examples
            .par_chunks(cfg.grad_chunk.max(1))
            .map(|chunk| {
                run_chunk(model, |tape, model, ids| {
                    losses::pair_batch_loss_sum(tape, model, ids, chunk, loss_cfg)
                })
            })
            .collect();

        let mut total: GradVecs = vec![None; model.params.len()];
        let mut batch_loss_sum = 0.0;
        for res in chunk_results {
            let (value, grads) = res?;
            batch_loss_sum += value;
            merge_grads(&mut total, grads);
        }
        let batch_loss = batch_loss_sum / batch.len() as f64;
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: batch_ix,
            });
        }
        scale_grads(&mut total, 1.0 / batch.len() as f64);
        if let Some(max_norm) = cfg.grad_clip {
            clip_grads(&mut total, max_norm);
        }
        adam.step(&mut model.params, &total, adam_cfg)?;
        loss_sum += batch_loss;
        batches += 1;
    }
    Ok(if batches == 0 {
        0.0
    } else {
        loss_sum / batches as f64
    })
}

fn cross_entropy_epoch(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut epoch_stream(cfg.seed, "batch", epoch));

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for (batch_ix, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        let chunk_results: Vec<Result<(f64, GradVecs), TensorError>> = batch
            .par_chunks(cfg.grad_chunk.max(1))
            .map(|chunk| {
                run_chunk(model, |tape, model, ids| {
                    cross_entropy_chunk_loss(tape, model, ids, corpus, chunk)
                })
            })
            .collect();
        let mut total: GradVecs = vec![None; model.params.len()];
        let mut batch_loss_sum = 0.0;
        for res in chunk_results {
            let (value, grads) = res?;
            batch_loss_sum += value;
            merge_grads(&mut total, grads);
        }
        let batch_loss = batch_loss_sum / batch.len() as f64;
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: batch_ix,
            });
        }
        scale_grads(&mut total, 1.0 / batch.len() as f64);
        if let Some(max_norm) = cfg.grad_clip {
            clip_grads(&mut total, max_norm);
        }
        adam.step(&mut model.params, &total, adam_cfg)?;
        loss_sum += batch_loss;
        batches += 1;
    }
    Ok(if batches == 0 {
        0.0
    } else {
        loss_sum / batches as f64
    })
}

/// Summed softmax cross-entropy over a chunk of utterances, via the
/// single-utterance encoder path. Built as the KL loss against a one-hot
/// label, which reduces exactly to `-log softmax(scores)[label]`.
fn cross_entropy_chunk_loss<'p>(
    tape: &mut Tape<'p>,
    model: &Model,
    ids: &crate::model::ModelIds,
    corpus: &Corpus,
    utterance_ixs: &[usize],
) -> Result<TensorId, TensorError> {
    let mut terms = Vec::with_capacity(utterance_ixs.len());
    for &ix in utterance_ixs {
        let u = &corpus.utterances[ix];
        let rep = model.encode_single(tape, ids, &u.tokens)?;
        let scores = model.classify(tape, ids, rep)?;
        let mut one_hot = vec![0.0; model.num_classes];
        one_hot[u.label] = 1.0;
        terms.push(losses::mixup_loss(tape, scores, &one_hot)?);
    }
    let cat = tape.concat0(&terms)?;
    tape.sum(cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::data::{corpus_from_parts, EmbeddingTable, Split};
    use crate::encoders::{EncoderConfig, EncoderKind};
    use crate::pairing::{sample_pools, PoolConfig};

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig {
            emb_dim: 8,
            filter_widths: vec![1, 2],
            filters_per_width: 4,
            rep_dim: 10,
            hidden: 5,
            n_heads: 2,
            attn_dim: 4,
        }
    }

    fn tiny_model(kind: EncoderKind, vocab: usize, classes: usize, seed: u64) -> Model {
        let emb = EmbeddingTable::seeded_random(vocab, 8, seed);
        Model::new(
            kind,
            tiny_enc(),
            ClassifierConfig {
                hidden1: 8,
                hidden2: 6,
            },
            &emb,
            classes,
            seed,
        )
    }

    /// Two linearly separable classes over disjoint token sets.
    fn separable_corpus() -> (Corpus, Corpus) {
        let mut rows = Vec::new();
        for k in 0..10u32 {
            rows.push((vec![k % 3, 3 + k % 2], 0));
            rows.push((vec![5 + k % 3, 8 + k % 2], 1));
        }
        let corpus = corpus_from_parts(rows, 2, Split::Train);
        corpus.split_train_dev(0.2, 7)
    }

    fn pool_cfg() -> PoolConfig {
        PoolConfig {
            positive_pool: 60,
            negative_pool: 120,
            mined_positive: 30,
            mined_negative: 60,
        }
    }

    #[test]
    fn pairwise_training_solves_a_separable_micro_corpus() {
        let (train, dev) = separable_corpus();
        let mut model = tiny_model(EncoderKind::TextCnn, 10, 2, 42);
        let pool = sample_pools(&train, pool_cfg(), 42).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            seed: 42,
            ..TrainConfig::default()
        };
        let out = train_quiet(&mut model, &train, &dev, Some(&pool), &cfg);
        assert_eq!(
            out.best.dev_macro_f1, 1.0,
            "expected perfect dev macro-F1, got {}",
            out.best.dev_macro_f1
        );
    }

    #[test]
    fn cross_entropy_training_solves_the_same_corpus() {
        let (train, dev) = separable_corpus();
        let mut model = tiny_model(EncoderKind::TextCnn, 10, 2, 43);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            seed: 43,
            mode: TrainMode::CrossEntropy,
            ..TrainConfig::default()
        };
        let out = train_quiet(&mut model, &train, &dev, None, &cfg);
        assert_eq!(out.best.dev_macro_f1, 1.0);
        assert!(out.epochs.iter().all(|e| e.gamma.is_none()));
    }

    #[test]
    fn initial_cross_entropy_loss_is_near_log_c() {
        let (train, dev) = separable_corpus();
        let mut model = tiny_model(EncoderKind::TextCnn, 10, 2, 44);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1000, // one batch: first loss is the init loss
            seed: 44,
            mode: TrainMode::CrossEntropy,
            ..TrainConfig::default()
        };
        let out = train_quiet(&mut model, &train, &dev, None, &cfg);
        let ln_c = (2.0f64).ln();
        let loss = out.epochs[0].train_loss;
        assert!(
            (loss - ln_c).abs() / ln_c < 0.1,
            "init loss {loss} not within 10% of ln(C) = {ln_c}"
        );
    }

    #[test]
    fn empty_mined_set_leaves_parameters_unchanged() {
        let (train, dev) = separable_corpus();
        let mut model = tiny_model(EncoderKind::TextCnn, 10, 2, 45);
        let before = model.params.clone();
        let pool = sample_pools(
            &train,
            PoolConfig {
                positive_pool: 10,
                negative_pool: 10,
                mined_positive: 0,
                mined_negative: 0,
            },
            45,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 45,
            ..TrainConfig::default()
        };
        let _ = train_quiet(&mut model, &train, &dev, Some(&pool), &cfg);
        for (a, b) in before.iter().zip(model.params.iter()) {
            assert_eq!(a.values, b.values, "parameter {} changed", a.name);
        }
    }

    #[test]
    fn same_seed_reproduces_metrics_bit_for_bit() {
        let (train, dev) = separable_corpus();
        let run = || {
            let mut model = tiny_model(EncoderKind::TextCnn, 10, 2, 46);
            let pool = sample_pools(&train, pool_cfg(), 46).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 16,
                seed: 46,
                ..TrainConfig::default()
            };
            let out = train_quiet(&mut model, &train, &dev, Some(&pool), &cfg);
            out.epochs
                .iter()
                .map(|e| (e.train_loss.to_bits(), e.dev_macro_f1.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pure_contrastive_beta_leaves_classifier_bits_untouched() {
        let (train_split, dev) = separable_corpus();
        let mut model = tiny_model(EncoderKind::TextCnn, 10, 2, 47);
        let before: Vec<Vec<u64>> = model
            .params
            .iter()
            .filter(|p| p.name.starts_with("cls."))
            .map(|p| p.values.iter().map(|v| v.to_bits()).collect())
            .collect();
        let pool = sample_pools(&train_split, pool_cfg(), 47).unwrap();
        let loss_cfg = LossConfig {
            beta: 1.0,
            ..LossConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 47,
            ..TrainConfig::default()
        };
        let mut sink = |_: TrainEvent| {};
        train(
            &mut model,
            &train_split,
            &dev,
            Some(&pool),
            &loss_cfg,
            &cfg,
            &mut sink,
        )
        .unwrap();
        let after: Vec<Vec<u64>> = model
            .params
            .iter()
            .filter(|p| p.name.starts_with("cls."))
            .map(|p| p.values.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
        // and the encoder did move
        assert!(model
            .params
            .iter()
            .filter(|p| p.name.starts_with("cnn."))
            .any(|p| p.values.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn best_checkpoint_maximizes_dev_f1_with_earliest_tie() {
        let (train, dev) = separable_corpus();
        let mut model = tiny_model(EncoderKind::TextCnn, 10, 2, 48);
        let pool = sample_pools(&train, pool_cfg(), 48).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            seed: 48,
            ..TrainConfig::default()
        };
        let out = train_quiet(&mut model, &train, &dev, Some(&pool), &cfg);
        let best_f1 = out
            .epochs
            .iter()
            .map(|e| e.dev_macro_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.dev_macro_f1, best_f1);
        let first_best = out
            .epochs
            .iter()
            .find(|e| e.dev_macro_f1 == best_f1)
            .unwrap();
        assert_eq!(out.best.epoch, first_best.epoch);
    }

    fn train_quiet(
        model: &mut Model,
        train_corpus: &Corpus,
        dev: &Corpus,
        pool: Option<&crate::pairing::PairPool>,
        cfg: &TrainConfig,
    ) -> TrainOutcome {
        let loss_cfg = LossConfig {
            rare_threshold: 3,
            ..LossConfig::default()
        };
        let mut sink = |_: TrainEvent| {};
        train(model, train_corpus, dev, pool, &loss_cfg, cfg, &mut sink).unwrap()
    }
}
