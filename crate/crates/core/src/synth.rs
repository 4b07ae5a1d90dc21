//! Synthetic token-pattern corpora with a Zipf class distribution.
//!
//! Class identity is a two-token signature drawn from a shared alphabet:
//! every utterance of a class carries both tokens of its pair, mixed with
//! shared noise and occasional distractor tokens from the same alphabet.
//! Single tokens are ambiguous (each alphabet token participates in several
//! classes), so a class is pinned down only by the co-occurrence. That makes
//! the corpus a desk-scale stand-in for heavily imbalanced utterance
//! classification: frequent classes give a classifier plenty of evidence to
//! learn the conjunction, rare classes are few-shot and are most reliably
//! recognized by proximity to one of their handful of training exemplars.

use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible synthetic corpus: {reason}")]
    Infeasible { reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub zipf_exponent: f64,
    /// Size of the shared signature alphabet the class pairs are drawn from.
    pub sig_alphabet: usize,
    /// Distinct signature pairs (surface patterns) per class; each
    /// utterance realizes one of them.
    pub surface_modes: usize,
    pub noise_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a filler slot holds a random alphabet token instead
    /// of noise, blurring single-token evidence further.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 30,
            train_size: 3000,
            test_size: 1000,
            zipf_exponent: 1.2,
            sig_alphabet: 13,
            surface_modes: 2,
            noise_tokens: 150,
            min_len: 3,
            max_len: 10,
            distractor_rate: 0.12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub class_names: Vec<String>,
    /// Per class, the signature token pair of each surface mode.
    pub class_signatures: Vec<Vec<[String; 2]>>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// `utterance<TAB>label` lines, shuffled.
    pub train_lines: Vec<String>,
    pub test_lines: Vec<String>,
    pub manifest: SynthManifest,
}

/// Zipf masses for ranks `1..=n` with exponent `s`.
fn zipf_masses(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|m| m / total).collect()
}

/// Largest-remainder apportionment of `total` onto `masses`, with an
/// optional per-class minimum of one.
fn apportion(masses: &[f64], total: usize, min_one: bool) -> Vec<usize> {
    let quotas: Vec<f64> = masses.iter().map(|m| m * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &ix in order.iter().cycle().take(total.saturating_sub(assigned)) {
        sizes[ix] += 1;
    }
    if min_one {
        for ix in 0..sizes.len() {
            while sizes[ix] == 0 {
                let donor = sizes
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &s)| s)
                    .map(|(i, _)| i)
                    .expect("non-empty");
                sizes[donor] -= 1;
                sizes[ix] += 1;
            }
        }
    }
    sizes
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    let c = cfg.num_classes;
    if c == 0 || cfg.train_size < c {
        return Err(SynthError::Infeasible {
            reason: format!(
                "need at least one training example per class ({c} classes, {} examples)",
                cfg.train_size
            ),
        });
    }
    if cfg.min_len < 3 || cfg.max_len < cfg.min_len {
        return Err(SynthError::Infeasible {
            reason: format!(
                "length range {}..={} cannot hold a two-token signature plus noise",
                cfg.min_len, cfg.max_len
            ),
        });
    }
    let modes = cfg.surface_modes.max(1);
    let distinct_pairs = cfg.sig_alphabet * cfg.sig_alphabet.saturating_sub(1) / 2;
    if distinct_pairs < c * modes {
        return Err(SynthError::Infeasible {
            reason: format!(
                "alphabet of {} tokens yields {distinct_pairs} signature pairs < {} (classes x modes)",
                cfg.sig_alphabet,
                c * modes
            ),
        });
    }
    if cfg.noise_tokens == 0 {
        return Err(SynthError::Infeasible {
            reason: "need at least one noise token".to_string(),
        });
    }

    let class_names: Vec<String> = (0..c).map(|r| format!("c{r:03}")).collect();
    let sig = |t: usize| format!("s{t:02}");

    // Distinct signature pairs in a seeded random order, dealt round-robin
    // so every class receives `modes` disjoint surface patterns.
    let signatures: Vec<Vec<(usize, usize)>> = {
        let mut all: Vec<(usize, usize)> = (0..cfg.sig_alphabet)
            .flat_map(|a| (a + 1..cfg.sig_alphabet).map(move |b| (a, b)))
            .collect();
        all.shuffle(&mut stream(cfg.seed, "synth/pairs"));
        (0..c)
            .map(|r| (0..modes).map(|m| all[m * c + r]).collect())
            .collect()
    };

    let masses = zipf_masses(c, cfg.zipf_exponent);
    let train_counts = apportion(&masses, cfg.train_size, true);
    let test_counts = apportion(&masses, cfg.test_size, false);

    // Rare classes speak in short, close-to-verbatim patterns (the few-shot
    // regime: their handful of examples form tight clusters); frequent
    // classes are longer and noisier. Length interpolates with log-count.
    let length_range = |count: usize| -> (usize, usize) {
        let max_c = *train_counts.iter().max().expect("non-empty") as f64;
        let min_c = *train_counts.iter().min().expect("non-empty") as f64;
        let t = if max_c > min_c {
            ((count as f64).ln() - min_c.ln()) / (max_c.ln() - min_c.ln())
        } else {
            0.5
        };
        let span = (cfg.max_len - cfg.min_len) as f64;
        let lo = cfg.min_len + (t * (span - 2.0).max(0.0)).round() as usize;
        (lo, (lo + 2).min(cfg.max_len))
    };

    let gen_split = |split: &str, counts: &[usize]| -> Vec<String> {
        let mut rng = stream(cfg.seed, &format!("synth/{split}"));
        let mut lines = Vec::with_capacity(counts.iter().sum());
        for (r, &count) in counts.iter().enumerate() {
            let (len_lo, len_hi) = length_range(train_counts[r]);
            for k in 0..count {
                // round-robin over modes so even tiny classes exercise all
                // of their surface patterns
                let (a, b) = signatures[r][k % modes];
                let len = rng.gen_range(len_lo..=len_hi);
                let mut tokens: Vec<String> = vec![sig(a), sig(b)];
                while tokens.len() < len {
                    if rng.gen_bool(cfg.distractor_rate) {
                        tokens.push(sig(rng.gen_range(0..cfg.sig_alphabet)));
                    } else {
                        tokens.push(format!("n{:03}", rng.gen_range(0..cfg.noise_tokens)));
                    }
                }
                tokens.shuffle(&mut rng);
                lines.push(format!("{}\t{}", tokens.join(" "), class_names[r]));
            }
        }
        lines.shuffle(&mut rng);
        lines
    };

    let train_lines = gen_split("train", &train_counts);
    let test_lines = gen_split("test", &test_counts);

    let class_signatures = signatures
        .iter()
        .map(|ms| ms.iter().map(|&(a, b)| [sig(a), sig(b)]).collect())
        .collect();
    Ok(SynthOutput {
        train_lines,
        test_lines,
        manifest: SynthManifest {
            config: cfg.clone(),
            class_names,
            class_signatures,
            train_counts,
            test_counts,
            vocab_size: cfg.sig_alphabet + cfg.noise_tokens,
        },
    })
}
