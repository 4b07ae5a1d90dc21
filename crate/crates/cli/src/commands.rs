//! Implementations of the five subcommands.

use crate::args::{EvalArgs, PrepareArgs, SynthArgs, TrainArgs};
use crate::config::{sha256_file, PartialConfig, ResolvedRun, RunConfig};
use crate::{config_err, runtime_err, Failure};
use pairlearn::data::{quintiles, Corpus, EmbeddingTable, LabelMap, QuintilePartition, Split, Vocab};
use pairlearn::eval::{
    build_index, classifier_predictions, fuse, metrics_from_predictions, score_corpus, EvalReport,
    FusionNorm,
};
use pairlearn::model::Model;
use pairlearn::pairing::{sample_pools, PairPool};
use pairlearn::trainer::{checkpoint, train as run_train, TrainEvent, TrainMode, TrainOutcome};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const VOCAB_FILE: &str = "vocab.json";
const LABELS_FILE: &str = "labels.json";
const CONFIG_FILE: &str = "config.resolved.json";

// ── Shared plumbing ──────────────────────────────────────────────────────

fn ensure_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| config_err(format!("--out: cannot create {}: {e}", path.display())))
}

fn require_file(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let path = path
        .as_ref()
        .ok_or_else(|| config_err(format!("{flag} is required")))?;
    if !path.is_file() {
        return Err(config_err(format!(
            "{flag}: no such file: {}",
            path.display()
        )));
    }
    Ok(path.clone())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    fs::write(path, text).map_err(runtime_err)
}

fn resolve_config(hyper: &crate::args::HyperArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(config_path) = &hyper.config {
        if !config_path.is_file() {
            return Err(config_err(format!(
                "--config: no such file: {}",
                config_path.display()
            )));
        }
        let text = fs::read_to_string(config_path).map_err(runtime_err)?;
        let part: PartialConfig = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("--config: {}: {e}", config_path.display())))?;
        cfg.overlay(part);
    }
    cfg.overlay(hyper.to_partial());

    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(config_err(format!("--beta must be in [0, 1], got {}", cfg.beta)));
    }
    if !(0.0 < cfg.dev_fraction && cfg.dev_fraction < 1.0) {
        return Err(config_err("--dev-fraction must be in (0, 1)"));
    }
    if cfg.epochs == 0 {
        return Err(config_err("--epochs must be at least 1"));
    }
    if cfg.embeddings.is_some() && cfg.emb_dim != 300 {
        return Err(config_err(
            "--emb-dim must be 300 when --embeddings is given",
        ));
    }
    Ok(cfg)
}

fn input_hashes(cfg: &RunConfig) -> Result<BTreeMap<String, String>, Failure> {
    let mut hashes = BTreeMap::new();
    for (name, path) in [
        ("corpus", &cfg.corpus),
        ("test", &cfg.test),
        ("embeddings", &cfg.embeddings),
    ] {
        if let Some(p) = path {
            hashes.insert(name.to_string(), sha256_file(p).map_err(runtime_err)?);
        }
    }
    Ok(hashes)
}

fn write_resolved(out: &Path, command: &str, cfg: &RunConfig) -> Result<(), Failure> {
    write_json(
        &out.join(CONFIG_FILE),
        &ResolvedRun {
            command,
            config: cfg,
            input_hashes: input_hashes(cfg)?,
        },
    )
}

struct LoadedData {
    train_split: Corpus,
    dev: Corpus,
    vocab: Vocab,
    labels: LabelMap,
}

fn load_training_data(cfg: &RunConfig) -> Result<LoadedData, Failure> {
    let corpus_path = require_file(&cfg.corpus, "--corpus")?;
    let (full, vocab, labels) = Corpus::load_train(&corpus_path).map_err(runtime_err)?;
    let (train_split, dev) = full.split_train_dev(cfg.dev_fraction, cfg.seed);
    Ok(LoadedData {
        train_split,
        dev,
        vocab,
        labels,
    })
}

fn build_model(cfg: &RunConfig, vocab: &Vocab, num_classes: usize) -> Result<Model, Failure> {
    let mut table = match &cfg.embeddings {
        Some(_) => {
            let path = require_file(&cfg.embeddings, "--embeddings")?;
            EmbeddingTable::load(&path, vocab, cfg.seed).map_err(runtime_err)?
        }
        None => EmbeddingTable::seeded_random(vocab.len(), cfg.emb_dim, cfg.seed),
    };
    table.trainable = !cfg.freeze_embeddings;
    let mut model = Model::new(
        cfg.encoder,
        cfg.encoder_config(),
        pairlearn::classifier::ClassifierConfig::default(),
        &table,
        num_classes,
        cfg.seed,
    );
    model.second_order = cfg.second_order;
    Ok(model)
}

/// JSONL sinks: `metrics.jsonl` holds only deterministic fields and is the
/// byte-reproducible record of a run; `train_log.jsonl` adds wall-clock
/// timing and mining telemetry.
struct LogSink {
    metrics: fs::File,
    log: fs::File,
    last_mark: Instant,
}

impl LogSink {
    fn create(out: &Path, suffix: &str) -> Result<Self, Failure> {
        let open = |name: String| fs::File::create(out.join(name)).map_err(runtime_err);
        Ok(LogSink {
            metrics: open(format!("metrics{suffix}.jsonl"))?,
            log: open(format!("train_log{suffix}.jsonl"))?,
            last_mark: Instant::now(),
        })
    }

    fn write(&mut self, event: &TrainEvent) {
        match event {
            TrainEvent::Mining {
                epoch,
                pairs,
                mean_positive_distance,
                mean_negative_distance,
            } => {
                let line = json!({
                    "event": "mining",
                    "epoch": epoch,
                    "pairs": pairs,
                    "mean_positive_distance": mean_positive_distance,
                    "mean_negative_distance": mean_negative_distance,
                });
                let _ = writeln!(self.log, "{line}");
            }
            TrainEvent::Epoch(record) => {
                let metrics_line = serde_json::to_string(record).expect("record serializes");
                let _ = writeln!(self.metrics, "{metrics_line}");
                let seconds = self.last_mark.elapsed().as_secs_f64();
                self.last_mark = Instant::now();
                let mut with_time =
                    serde_json::to_value(record).expect("record serializes");
                with_time["event"] = json!("epoch");
                with_time["seconds"] = json!(seconds);
                let _ = writeln!(self.log, "{with_time}");
            }
        }
    }
}

fn train_once(
    cfg: &RunConfig,
    data: &LoadedData,
    pool: Option<&PairPool>,
    out: &Path,
    log_suffix: &str,
) -> Result<(Model, TrainOutcome), Failure> {
    let mut model = build_model(cfg, &data.vocab, data.labels.len())?;
    let mut sink = LogSink::create(out, log_suffix)?;
    let outcome = run_train(
        &mut model,
        &data.train_split,
        &data.dev,
        pool,
        &cfg.loss_config(),
        &cfg.train_config(),
        &mut |ev| sink.write(&ev),
    )
    .map_err(runtime_err)?;
    model.params = outcome.best.params.clone();
    Ok((model, outcome))
}

fn save_run(
    out: &Path,
    cfg: &RunConfig,
    data: &LoadedData,
    model: &Model,
    outcome: &TrainOutcome,
) -> Result<(), Failure> {
    let meta = checkpoint::CheckpointMeta {
        encoder: model.kind,
        enc_cfg: model.enc_cfg.clone(),
        cls_cfg: model.cls_cfg.clone(),
        num_classes: model.num_classes,
        second_order: model.second_order,
        epoch: outcome.best.epoch,
        dev_macro_f1: outcome.best.dev_macro_f1,
        dev_accuracy: outcome.best.dev_accuracy,
        gamma: outcome.best.gamma,
        fusion_norm: cfg.fusion_norm,
    };
    checkpoint::save(&out.join(CHECKPOINT_FILE), &meta, &model.params).map_err(runtime_err)?;
    write_json(&out.join(VOCAB_FILE), &data.vocab)?;
    write_json(&out.join(LABELS_FILE), &data.labels)?;
    Ok(())
}

struct TestEvaluation {
    report: EvalReport,
    scored_gold: Vec<usize>,
    predictions: Vec<usize>,
    fused_top: Vec<Vec<(usize, f64)>>,
}

fn evaluate_on_test(
    model: &Model,
    train_split: &Corpus,
    test: &Corpus,
    part: Option<&QuintilePartition>,
    gamma: Option<f64>,
    fusion_norm: FusionNorm,
) -> Result<TestEvaluation, Failure> {
    if test.is_empty() {
        return Err(runtime_err("test corpus is empty"));
    }
    let num_classes = test.num_classes.max(model.num_classes);
    match gamma {
        Some(gamma) => {
            let index = build_index(model, train_split).map_err(runtime_err)?;
            let scored = score_corpus(model, &index, test).map_err(runtime_err)?;
            let mut predictions = Vec::with_capacity(test.len());
            let mut fused_top = Vec::with_capacity(test.len());
            for (nn, cls) in scored.nn_raw.iter().zip(&scored.cls_raw) {
                let fused = fuse(nn, cls, gamma, fusion_norm).map_err(runtime_err)?;
                let mut ranked: Vec<(usize, f64)> =
                    fused.c_final.iter().copied().enumerate().collect();
                ranked.sort_by(|(ia, a), (ib, b)| b.total_cmp(a).then(ia.cmp(ib)));
                predictions.push(ranked[0].0);
                ranked.truncate(5);
                fused_top.push(ranked);
            }
            let report = metrics_from_predictions(
                &scored.gold,
                &predictions,
                num_classes,
                part,
                Some(gamma),
            );
            Ok(TestEvaluation {
                report,
                scored_gold: scored.gold,
                predictions,
                fused_top,
            })
        }
        None => {
            let predictions = classifier_predictions(model, test).map_err(runtime_err)?;
            let gold: Vec<usize> = test.utterances.iter().map(|u| u.label).collect();
            let report = metrics_from_predictions(&gold, &predictions, num_classes, part, None);
            let fused_top = vec![Vec::new(); predictions.len()];
            Ok(TestEvaluation {
                report,
                scored_gold: gold,
                predictions,
                fused_top,
            })
        }
    }
}

fn write_predictions_csv(
    path: &Path,
    labels: &LabelMap,
    eval: &TestEvaluation,
) -> Result<(), Failure> {
    let mut f = fs::File::create(path).map_err(runtime_err)?;
    writeln!(f, "index,gold,pred,top5").map_err(runtime_err)?;
    for (ix, ((gold, pred), top)) in eval
        .scored_gold
        .iter()
        .zip(&eval.predictions)
        .zip(&eval.fused_top)
        .enumerate()
    {
        let top5 = top
            .iter()
            .map(|(c, s)| format!("{}:{s:.6}", labels.name(*c)))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            f,
            "{ix},{},{},{top5}",
            labels.name(*gold),
            labels.name(*pred)
        )
        .map_err(runtime_err)?;
    }
    Ok(())
}

// ── synth ────────────────────────────────────────────────────────────────

pub fn synth(args: SynthArgs) -> Result<(), Failure> {
    ensure_dir(&args.out)?;
    let cfg = pairlearn::synth::SynthConfig {
        num_classes: args.classes,
        train_size: args.train_size,
        test_size: args.test_size,
        zipf_exponent: args.zipf_exponent,
        sig_alphabet: args.sig_alphabet,
        surface_modes: args.surface_modes,
        noise_tokens: args.noise_tokens,
        min_len: args.min_len,
        max_len: args.max_len,
        distractor_rate: args.distractor_rate,
        seed: args.seed,
    };
    let output = pairlearn::synth::generate(&cfg).map_err(|e| config_err(e.to_string()))?;
    fs::write(
        args.out.join("train.tsv"),
        output.train_lines.join("\n") + "\n",
    )
    .map_err(runtime_err)?;
    fs::write(
        args.out.join("test.tsv"),
        output.test_lines.join("\n") + "\n",
    )
    .map_err(runtime_err)?;
    write_json(&args.out.join("synth_manifest.json"), &output.manifest)?;
    println!(
        "wrote {} train / {} test utterances over {} classes to {}",
        output.train_lines.len(),
        output.test_lines.len(),
        args.classes,
        args.out.display()
    );
    Ok(())
}

// ── prepare ──────────────────────────────────────────────────────────────

pub fn prepare(args: PrepareArgs) -> Result<(), Failure> {
    let corpus_path = require_file(&args.corpus, "--corpus")?;
    ensure_dir(&args.out)?;
    let (corpus, vocab, labels) = Corpus::load_train(&corpus_path).map_err(runtime_err)?;

    let quintile_part = if corpus.num_classes >= 5 {
        Some(quintiles(&corpus).map_err(runtime_err)?)
    } else {
        None
    };

    let embedding_coverage = match &args.embeddings {
        Some(_) => {
            let path = require_file(&args.embeddings, "--embeddings")?;
            let table = EmbeddingTable::load(&path, &vocab, args.seed).map_err(runtime_err)?;
            // a token counts as covered when its row was not left to the
            // seeded random fallback; detect via an independent reload with
            // a different seed: rows that differ were randomly filled
            let probe = EmbeddingTable::load(&path, &vocab, args.seed.wrapping_add(1))
                .map_err(runtime_err)?;
            let covered = (0..vocab.len() as u32)
                .filter(|&id| table.row(id) == probe.row(id))
                .count();
            Some(json!({
                "tokens": vocab.len(),
                "pretrained_rows": covered,
            }))
        }
        None => None,
    };

    let stats = json!({
        "utterances": corpus.len(),
        "classes": corpus.num_classes,
        "vocabulary": vocab.len(),
        "class_counts": corpus.class_counts,
        "label_names": (0..labels.len()).map(|i| labels.name(i).to_string()).collect::<Vec<_>>(),
        "quintiles": quintile_part,
        "embedding_coverage": embedding_coverage,
    });
    write_json(&args.out.join("corpus_stats.json"), &stats)?;

    match (args.subsets, args.subset_size) {
        (Some(k), Some(size)) => {
            let subsets = corpus
                .zipf_subsets(k, size, args.seed)
                .map_err(|e| config_err(e.to_string()))?;
            // manifests refer to original line numbers, so re-read the file
            let raw = fs::read_to_string(&corpus_path).map_err(runtime_err)?;
            let raw_lines: Vec<&str> = raw.lines().collect();
            let manifest: Vec<&Vec<usize>> = subsets.iter().map(|(_, ix)| ix).collect();
            write_json(&args.out.join("subsets_manifest.json"), &manifest)?;
            for (s, (_, indices)) in subsets.iter().enumerate() {
                let body: Vec<&str> = indices.iter().map(|&i| raw_lines[i]).collect();
                fs::write(
                    args.out.join(format!("subset_{s}.tsv")),
                    body.join("\n") + "\n",
                )
                .map_err(runtime_err)?;
            }
            println!("wrote {k} subsets of {size} utterances");
        }
        (None, None) => {}
        _ => {
            return Err(config_err(
                "--subsets and --subset-size must be given together",
            ))
        }
    }

    println!(
        "corpus: {} utterances, {} classes, vocabulary {}",
        corpus.len(),
        corpus.num_classes,
        vocab.len()
    );
    if let Some(part) = &quintile_part {
        println!(
            "quintile mass (rarest to most frequent): {}",
            part.mass_per_quintile
                .iter()
                .map(|m| format!("{:.1}%", 100.0 * m))
                .collect::<Vec<_>>()
                .join(" / ")
        );
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.hyper)?;
    ensure_dir(&args.out)?;
    let data = load_training_data(&cfg)?;
    write_resolved(&args.out, "train", &cfg)?;

    let pool = match cfg.mode {
        TrainMode::Pairwise => Some(
            sample_pools(&data.train_split, cfg.pool_config(), cfg.seed)
                .map_err(runtime_err)?,
        ),
        TrainMode::CrossEntropy => None,
    };
    let (model, outcome) = train_once(&cfg, &data, pool.as_ref(), &args.out, "")?;
    save_run(&args.out, &cfg, &data, &model, &outcome)?;
    println!(
        "best epoch {} dev macro-F1 {:.4}{}",
        outcome.best.epoch,
        outcome.best.dev_macro_f1,
        outcome
            .best
            .gamma
            .map(|g| format!(" (gamma {g:.1})"))
            .unwrap_or_default()
    );

    if cfg.test.is_some() {
        let test_path = require_file(&cfg.test, "--test")?;
        let mut labels = data.labels.clone();
        let test = Corpus::load_with(&test_path, &data.vocab, &mut labels, Split::Test)
            .map_err(runtime_err)?;
        let part = quintiles(&data.train_split).ok();
        let eval = evaluate_on_test(
            &model,
            &data.train_split,
            &test,
            part.as_ref(),
            outcome.best.gamma,
            cfg.fusion_norm,
        )?;
        write_json(&args.out.join("eval_report.json"), &eval.report)?;
        if args.dump_predictions {
            write_predictions_csv(&args.out.join("predictions.csv"), &labels, &eval)?;
        }
        println!(
            "test accuracy {:.4} macro-F1 {:.4}",
            eval.report.accuracy, eval.report.macro_f1
        );
    }
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────────

#[derive(Deserialize)]
struct StoredRun {
    config: RunConfig,
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let model_dir = &args.model;
    if !model_dir.is_dir() {
        return Err(config_err(format!(
            "--model: no such directory: {}",
            model_dir.display()
        )));
    }
    let stored: StoredRun = serde_json::from_str(
        &fs::read_to_string(model_dir.join(CONFIG_FILE)).map_err(runtime_err)?,
    )
    .map_err(|e| runtime_err(format!("cannot parse stored run config: {e}")))?;
    let run_cfg = stored.config;

    let (model, meta) =
        checkpoint::load_model(&model_dir.join(CHECKPOINT_FILE)).map_err(runtime_err)?;
    let mut vocab: Vocab = serde_json::from_str(
        &fs::read_to_string(model_dir.join(VOCAB_FILE)).map_err(runtime_err)?,
    )
    .map_err(runtime_err)?;
    vocab.reindex();
    let mut labels: LabelMap = serde_json::from_str(
        &fs::read_to_string(model_dir.join(LABELS_FILE)).map_err(runtime_err)?,
    )
    .map_err(runtime_err)?;
    labels.reindex();

    let test_path = require_file(&args.corpus, "--corpus")?;
    let train_path = match &args.train_corpus {
        Some(_) => require_file(&args.train_corpus, "--train-corpus")?,
        None => require_file(&run_cfg.corpus, "--train-corpus (none recorded in the run)")?,
    };

    // Rebuild the training-side split exactly as the run did, so the index
    // and quintiles match what early stopping saw.
    let (full_train, _, _) = Corpus::load_train(&train_path).map_err(runtime_err)?;
    let (train_split, _) = full_train.split_train_dev(run_cfg.dev_fraction, run_cfg.seed);
    let test =
        Corpus::load_with(&test_path, &vocab, &mut labels, Split::Test).map_err(runtime_err)?;
    let part = quintiles(&train_split).ok();

    let gamma = match (args.gamma, meta.gamma) {
        (Some(g), _) => {
            if !(0.0..=1.0).contains(&g) {
                return Err(config_err("--gamma must be in [0, 1]"));
            }
            Some(g)
        }
        (None, stored) => stored,
    };
    let eval = evaluate_on_test(
        &model,
        &train_split,
        &test,
        part.as_ref(),
        gamma,
        meta.fusion_norm,
    )?;

    let out = args.out.clone().unwrap_or_else(|| model_dir.clone());
    ensure_dir(&out)?;
    write_json(&out.join("eval_report.json"), &eval.report)?;
    if args.dump_predictions {
        write_predictions_csv(&out.join("predictions.csv"), &labels, &eval)?;
    }
    println!(
        "test accuracy {:.4} macro-F1 {:.4} over {} classes",
        eval.report.accuracy, eval.report.macro_f1, eval.report.num_test_classes
    );
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct AblationRow {
    name: String,
    beta: f64,
    gamma: Option<f64>,
    best_epoch: usize,
    dev_macro_f1: f64,
    test_accuracy: f64,
    test_macro_f1: f64,
    bottom_quintile_f1: Option<f64>,
    top_quintile_f1: Option<f64>,
}

pub fn ablate(args: TrainArgs) -> Result<(), Failure> {
    let base = resolve_config(&args.hyper)?;
    if base.mode != TrainMode::Pairwise {
        return Err(config_err("--mode must be pairwise for ablations"));
    }
    if base.test.is_none() {
        return Err(config_err("--test is required for ablations"));
    }
    ensure_dir(&args.out)?;
    let data = load_training_data(&base)?;
    write_resolved(&args.out, "ablate", &base)?;

    let test_path = require_file(&base.test, "--test")?;
    let mut labels = data.labels.clone();
    let test = Corpus::load_with(&test_path, &data.vocab, &mut labels, Split::Test)
        .map_err(runtime_err)?;
    let part = quintiles(&data.train_split).ok();

    // One pool, one seed, one split for every row.
    let pool =
        sample_pools(&data.train_split, base.pool_config(), base.seed).map_err(runtime_err)?;

    // (name, beta, pinned gamma grid, second-order attention)
    let variants: [(&str, f64, Option<f64>, bool); 4] = [
        ("full", base.beta, None, base.second_order),
        ("no_contrastive", 0.0, Some(0.0), base.second_order),
        ("no_mixup", 1.0, Some(1.0), base.second_order),
        ("no_second_order", base.beta, None, false),
    ];

    let mut rows = Vec::new();
    for (name, beta, pinned_gamma, second_order) in variants {
        let mut cfg = base.clone();
        cfg.beta = beta;
        cfg.second_order = second_order;
        if let Some(g) = pinned_gamma {
            cfg.gamma_grid = vec![g];
        }
        let (model, outcome) =
            train_once(&cfg, &data, Some(&pool), &args.out, &format!("_{name}"))?;
        let eval = evaluate_on_test(
            &model,
            &data.train_split,
            &test,
            part.as_ref(),
            outcome.best.gamma,
            cfg.fusion_norm,
        )?;
        println!(
            "{name:>16}  beta {beta:.1}  gamma {}  dev F1 {:.4}  test acc {:.4}  test F1 {:.4}",
            outcome
                .best
                .gamma
                .map(|g| format!("{g:.1}"))
                .unwrap_or_else(|| "-".to_string()),
            outcome.best.dev_macro_f1,
            eval.report.accuracy,
            eval.report.macro_f1,
        );
        rows.push(AblationRow {
            name: name.to_string(),
            beta,
            gamma: outcome.best.gamma,
            best_epoch: outcome.best.epoch,
            dev_macro_f1: outcome.best.dev_macro_f1,
            test_accuracy: eval.report.accuracy,
            test_macro_f1: eval.report.macro_f1,
            bottom_quintile_f1: eval.report.quintile_f1[0],
            top_quintile_f1: eval.report.quintile_f1[4],
        });
    }
    write_json(&args.out.join("ablation_report.json"), &rows)?;
    Ok(())
}
