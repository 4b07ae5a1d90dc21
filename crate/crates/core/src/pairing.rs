//! Positive/negative pair pools and per-epoch hard mining.
//!
//! Pools are sampled once per run: uniformly with replacement over the valid
//! (canonicalized `i < j`) pairs, falling back to full enumeration when the
//! distinct-pair space is smaller than the requested pool. Once per epoch,
//! the pools are re-scored with the current encoder and the hardest pairs
//! (most distant positives, closest negatives) become the epoch's training
//! set.

use crate::data::Corpus;
use crate::error::PairingError;
use crate::math;
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairInstance {
    pub i: usize,
    pub j: usize,
    pub y_i: usize,
    pub y_j: usize,
    /// 1 iff the pair is same-class.
    pub y_pair: bool,
}

impl PairInstance {
    fn new(i: usize, j: usize, y_i: usize, y_j: usize) -> Self {
        debug_assert_ne!(i, j);
        let (i, j, y_i, y_j) = if i < j { (i, j, y_i, y_j) } else { (j, i, y_j, y_i) };
        PairInstance {
            i,
            j,
            y_i,
            y_j,
            y_pair: y_i == y_j,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoolConfig {
    pub positive_pool: usize,
    pub negative_pool: usize,
    pub mined_positive: usize,
    pub mined_negative: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            positive_pool: 50_000,
            negative_pool: 100_000,
            mined_positive: 25_000,
            mined_negative: 50_000,
        }
    }
}

/// Sampled pair pools, fixed for the whole run.
#[derive(Debug, Clone)]
pub struct PairPool {
    pub positives: Vec<PairInstance>,
    pub negatives: Vec<PairInstance>,
    pub cfg: PoolConfig,
}

/// Sample the positive and negative pools. Positive sampling draws a class
/// with probability proportional to its number of distinct in-class pairs,
/// then a uniform pair inside it; negative sampling is rejection from the
/// uniform all-pairs distribution. Both are uniform over their pair spaces.
pub fn sample_pools(
    corpus: &Corpus,
    cfg: PoolConfig,
    seed: u64,
) -> Result<PairPool, PairingError> {
    let n = corpus.len();
    if n < 2 {
        return Err(PairingError::CorpusTooSmall);
    }
    let labels: Vec<usize> = corpus.utterances.iter().map(|u| u.label).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_classes];
    for (ix, &y) in labels.iter().enumerate() {
        members[y].push(ix);
    }
    let pair_count = |m: usize| m as u128 * (m as u128 - 1) / 2;
    let class_pairs: Vec<u128> = members.iter().map(|m| pair_count(m.len())).collect();
    let distinct_pos: u128 = class_pairs.iter().sum();
    let distinct_all = pair_count(n);
    let distinct_neg = distinct_all - distinct_pos;

    if cfg.positive_pool > 0 && distinct_pos == 0 {
        return Err(PairingError::NoPositivePairs);
    }

    let mut rng = stream(seed, "pools");
    let positives = if distinct_pos < cfg.positive_pool as u128 {
        // Pool shrinks to every distinct positive pair.
        let mut all = Vec::with_capacity(distinct_pos as usize);
        for m in &members {
            for a in 0..m.len() {
                for b in a + 1..m.len() {
                    all.push(PairInstance::new(m[a], m[b], labels[m[a]], labels[m[b]]));
                }
            }
        }
        all
    } else {
        let total = distinct_pos;
        let mut cumulative = Vec::with_capacity(class_pairs.len());
        let mut acc = 0u128;
        for &c in &class_pairs {
            acc += c;
            cumulative.push(acc);
        }
        (0..cfg.positive_pool)
            .map(|_| {
                let ticket = rng.gen_range(0..total);
                let class = cumulative.partition_point(|&c| c <= ticket);
                let m = &members[class];
                let a = rng.gen_range(0..m.len());
                let mut b = rng.gen_range(0..m.len() - 1);
                if b >= a {
                    b += 1;
                }
                PairInstance::new(m[a], m[b], class, class)
            })
            .collect()
    };

    let negatives = if distinct_neg < cfg.negative_pool as u128 {
        let mut all = Vec::with_capacity(distinct_neg as usize);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] != labels[j] {
                    all.push(PairInstance::new(i, j, labels[i], labels[j]));
                }
            }
        }
        all
    } else {
        (0..cfg.negative_pool)
            .map(|_| loop {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                if labels[i] != labels[j] {
                    break PairInstance::new(i, j, labels[i], labels[j]);
                }
            })
            .collect()
    };

    Ok(PairPool {
        positives,
        negatives,
        cfg,
    })
}

/// A mined pair with the distance it was selected at.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MinedPair {
    pub i: usize,
    pub j: usize,
    pub y_i: usize,
    pub y_j: usize,
    pub y_pair: bool,
    pub d: f64,
}

impl From<MinedPair> for PairInstance {
    fn from(m: MinedPair) -> Self {
        PairInstance {
            i: m.i,
            j: m.j,
            y_i: m.y_i,
            y_j: m.y_j,
            y_pair: m.y_pair,
        }
    }
}

/// Score every pool pair under `encode` (a single-utterance encoder over
/// utterance indices; its outputs are unit-normalized here) and keep the
/// `mined_positive` positives with the largest distance plus the
/// `mined_negative` negatives with the smallest. Top-k ties break by pool
/// order. The concatenated selection is shuffled with `shuffle_rng`.
///
/// Distances are Euclidean between L2-normalized representations, the same
/// metric the contrastive loss is defined on.
pub fn mine_hard_pairs<F>(
    pool: &PairPool,
    encode: F,
    shuffle_rng: &mut impl Rng,
) -> Vec<MinedPair>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    let mut referenced: Vec<usize> = pool
        .positives
        .iter()
        .chain(&pool.negatives)
        .flat_map(|p| [p.i, p.j])
        .collect();
    referenced.sort_unstable();
    referenced.dedup();

    let reps: Vec<(usize, Vec<f64>)> = referenced
        .par_iter()
        .map(|&ix| {
            let r = encode(ix);
            let unit = math::l2_normalize(&r)
                .expect("encoder produced a zero-norm representation while mining");
            (ix, unit)
        })
        .collect();
    let lookup = |ix: usize| -> &[f64] {
        let pos = referenced.binary_search(&ix).expect("indexed above");
        &reps[pos].1
    };

    let scored = |pairs: &[PairInstance]| -> Vec<MinedPair> {
        pairs
            .par_iter()
            .map(|p| MinedPair {
                i: p.i,
                j: p.j,
                y_i: p.y_i,
                y_j: p.y_j,
                y_pair: p.y_pair,
                d: math::euclidean(lookup(p.i), lookup(p.j)),
            })
            .collect()
    };
    let positives = scored(&pool.positives);
    let negatives = scored(&pool.negatives);

    // Stable selection: order by the mining key, ties by pool index.
    let top_k = |mut scored: Vec<(usize, MinedPair)>, k: usize, largest: bool| -> Vec<MinedPair> {
        scored.sort_by(|(ia, a), (ib, b)| {
            let ord = a.d.total_cmp(&b.d);
            let ord = if largest { ord.reverse() } else { ord };
            ord.then(ia.cmp(ib))
        });
        scored.truncate(k);
        scored.into_iter().map(|(_, p)| p).collect()
    };

    let mut mined = top_k(
        positives.into_iter().enumerate().collect(),
        pool.cfg.mined_positive,
        true,
    );
    mined.extend(top_k(
        negatives.into_iter().enumerate().collect(),
        pool.cfg.mined_negative,
        false,
    ));
    mined.shuffle(shuffle_rng);
    mined
}

/// Convenience: a mining shuffle stream for a given epoch.
pub fn mining_rng(seed: u64, epoch: usize) -> impl Rng {
    crate::rng::epoch_stream(seed, "mine", epoch)
}
