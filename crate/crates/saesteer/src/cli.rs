//! Command-line front end: `gen`, `train`, `explain`, `steer`, `eval`,
//! `report`.
//!
//! Flags mirror the library config fields one to one. A `--config FILE` of
//! `key=value` lines may set any flag, with the command line taking
//! precedence; the seed falls back to the `SAE_SEED` environment variable
//! when neither source sets it. Every artifact-producing run writes a
//! `<subcommand>_config.json` echo of the exact resolved parameters next to
//! its outputs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{run_eval, ExperimentConfig};
use crate::explain::{self, ExplainMethod};
use crate::sae::{self, TrainConfig};
use crate::steer::{self, SteerMode};
use crate::store;
use crate::topicgen::{self, TopicModelConfig};

const DEFAULT_SEED: u64 = 7;

const EXIT_HELP: &str = "exit codes:\n  0  success\n  1  unexpected failure\n  2  usage error\n  3  missing or unreadable input\n  4  invalid data or failed invariant";

#[derive(Parser)]
#[command(
    name = "saesteer",
    version,
    about = "Train Top-K sparse autoencoders on activation dumps, explain features as word sets, and steer activation streams",
    after_help = EXIT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic topic-model corpus with ground truth
    Gen(GenArgs),
    /// Train a Top-K sparse autoencoder over a shard manifest
    Train(TrainArgs),
    /// Explain model features (MI word ranking, TopAct or N2G spans)
    Explain(ExplainArgs),
    /// Apply amplify/calibrate steering to an activation stream
    Steer(SteerArgs),
    /// Score explanation methods against corpus ground truth
    Eval(EvalArgs),
    /// Render an eval report as a text or CSV table
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Seed for all randomness (fallback: SAE_SEED, then 7)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is the reproducibility mode
    #[arg(long)]
    threads: Option<usize>,
    /// key=value file supplying defaults for any flag
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of topics
    #[arg(long)]
    topics: Option<usize>,
    /// Documents per topic
    #[arg(long)]
    docs: Option<usize>,
    /// Tokens per document
    #[arg(long)]
    len: Option<usize>,
    /// Random-walk step standard deviation
    #[arg(long)]
    sigma: Option<f64>,
    /// Fraction of positions replaced by pattern tokens
    #[arg(long = "pattern-rate")]
    pattern_rate: Option<f64>,
    /// Number of pattern tokens (taken from the end of the vocabulary)
    #[arg(long)]
    patterns: Option<usize>,
    /// Vocabulary size
    #[arg(long)]
    vocab: Option<usize>,
    /// Embedding dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Scale of the generated vocabulary embeddings
    #[arg(long = "vocab-scale")]
    vocab_scale: Option<f64>,
    /// Hidden-state noise standard deviation
    #[arg(long = "hidden-noise")]
    hidden_noise: Option<f64>,
    /// Ground-truth words recorded per topic
    #[arg(long = "top-g")]
    top_g: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Shard manifest to train on
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Feature count C
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "k-init")]
    k_init: Option<usize>,
    #[arg(long = "k-final")]
    k_final: Option<usize>,
    /// Fraction of the first epoch over which K anneals
    #[arg(long = "k-anneal-fraction")]
    k_anneal_fraction: Option<f64>,
    /// Fraction of rows held out for validation
    #[arg(long = "val-fraction")]
    val_fraction: Option<f64>,
    /// Embedding file whose dimension must match the shards
    #[arg(long)]
    emb: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output JSONL file
    #[arg(long)]
    out: PathBuf,
    /// mi | topact | n2g
    #[arg(long)]
    method: Option<String>,
    /// Output-embedding container (MI)
    #[arg(long)]
    emb: Option<PathBuf>,
    /// Vocabulary file, one token per line
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Shard manifest (TopAct / N2G)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Words per explanation (MI)
    #[arg(long)]
    words: Option<usize>,
    /// Spans per feature (TopAct / N2G)
    #[arg(long = "top-n")]
    top_n: Option<usize>,
    /// Maximum span length in tokens
    #[arg(long = "span-len")]
    span_len: Option<usize>,
    /// N2G masking threshold
    #[arg(long)]
    tau: Option<f64>,
    /// Drop words below this emission quantile before MI ranking (off by default)
    #[arg(long = "min-emission")]
    min_emission: Option<f64>,
    /// Comma-separated feature ids (default: all)
    #[arg(long = "feature-ids")]
    feature_ids: Option<String>,
    /// JSONL of {"feature_id":int,"summary":str} merged into the output
    #[arg(long)]
    summaries: Option<PathBuf>,
    /// Also dump the full MI score table into this container file
    #[arg(long = "dump-scores")]
    dump_scores: Option<PathBuf>,
}

#[derive(Args)]
struct SteerArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Label JSONL: {"feature_id":int,"label":str}
    #[arg(long)]
    labels: PathBuf,
    /// Label to select
    #[arg(long)]
    select: String,
    /// Input shard manifest
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// amplify | calibrate | composite
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Ordered steps for composite mode, e.g. "amplify:-1,calibrate:2.5"
    #[arg(long)]
    steps: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory produced by `gen`
    #[arg(long)]
    corpus: PathBuf,
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output JSON file
    #[arg(long)]
    out: PathBuf,
    /// Features to match and score
    #[arg(long)]
    matched: Option<usize>,
    /// Words per word-level explanation
    #[arg(long)]
    words: Option<usize>,
    /// Spans per feature
    #[arg(long)]
    spans: Option<usize>,
    #[arg(long = "span-len")]
    span_len: Option<usize>,
    /// Emission quantile filter for MI (use --raw-mi to disable)
    #[arg(long = "min-emission")]
    min_emission: Option<f64>,
    /// Rank the raw MI objective without the emission filter
    #[arg(long = "raw-mi")]
    raw_mi: bool,
    /// Training report supplying the dead-feature count
    #[arg(long = "train-report")]
    train_report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Eval report JSON
    #[arg(long)]
    eval: PathBuf,
    /// text | csv
    #[arg(long)]
    format: Option<String>,
    /// Write here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// key=value config files
// ---------------------------------------------------------------------------

struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Error::Malformed(format!(
                        "config line {} is not key=value: {line:?}",
                        lineno + 1
                    )));
                };
                map.insert(k.trim().replace('_', "-"), v.trim().to_owned());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Malformed(format!("config value for {key} is unparseable: {raw:?}"))
            }),
        }
    }
}

/// Command line beats config file beats default.
fn pick<T: FromStr>(cli: Option<T>, cfg: &FileConfig, key: &str, default: T) -> Result<T> {
    if let Some(v) = cli {
        return Ok(v);
    }
    Ok(cfg.get::<T>(key)?.unwrap_or(default))
}

fn pick_seed(cli: Option<u64>, cfg: &FileConfig) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    if let Some(s) = cfg.get::<u64>("seed")? {
        return Ok(s);
    }
    match std::env::var("SAE_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| Error::Malformed(format!("SAE_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn init_threads(n: usize) {
    // The global pool can only be installed once per process; later calls
    // keep the existing pool, which is fine because results are
    // order-deterministic at any width.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global();
}

fn write_config_echo<T: Serialize>(cfg: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GenEcho {
    seed: u64,
    threads: usize,
    topics: usize,
    docs: usize,
    len: usize,
    sigma: f64,
    pattern_rate: f64,
    patterns: usize,
    vocab: usize,
    dim: usize,
    vocab_scale: f64,
    hidden_noise: f64,
    top_g: usize,
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let vocab = pick(args.vocab, &cfg, "vocab", 2000)?;
    let echo = GenEcho {
        seed: pick_seed(args.common.seed, &cfg)?,
        threads: pick(args.common.threads, &cfg, "threads", 1)?,
        topics: pick(args.topics, &cfg, "topics", 8)?,
        docs: pick(args.docs, &cfg, "docs", 200)?,
        len: pick(args.len, &cfg, "len", 64)?,
        sigma: pick(args.sigma, &cfg, "sigma", 0.02)?,
        pattern_rate: pick(args.pattern_rate, &cfg, "pattern-rate", 0.3)?,
        patterns: pick(args.patterns, &cfg, "patterns", 10)?,
        vocab,
        dim: pick(args.dim, &cfg, "dim", 32)?,
        vocab_scale: pick(args.vocab_scale, &cfg, "vocab-scale", 0.5)?,
        hidden_noise: pick(args.hidden_noise, &cfg, "hidden-noise", 0.01)?,
        top_g: pick(args.top_g, &cfg, "top-g", 200.min(vocab))?,
    };
    init_threads(echo.threads);
    if echo.patterns > echo.vocab {
        return Err(Error::InvalidConfig(
            "more pattern tokens than vocabulary entries".into(),
        ));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let emb = topicgen::synthetic_vocab_embeddings(
        echo.vocab,
        echo.dim,
        echo.patterns,
        echo.vocab_scale,
        echo.seed,
    )?;
    let tm_cfg = TopicModelConfig {
        dim: echo.dim,
        walk_std: echo.sigma,
        vocab_embeddings: emb,
        doc_length: echo.len,
        n_docs: echo.docs,
        seed: echo.seed,
        pattern_tokens: ((echo.vocab - echo.patterns) as u32..echo.vocab as u32).collect(),
        pattern_rate: echo.pattern_rate,
        hidden_noise_std: echo.hidden_noise,
        ground_truth_words: echo.top_g,
    };
    let (corpus, gt) = topicgen::generate_corpus(&tm_cfg, echo.topics, echo.docs)?;
    let shards = topicgen::corpus_to_shards(&corpus, &tm_cfg)?;

    let mut names = Vec::new();
    for (t, shard) in shards.iter().enumerate() {
        let name = format!("shard_t{t}.saes");
        store::write_shard(shard, &args.out.join(&name))?;
        names.push(name);
    }
    store::write_manifest(&names, &args.out.join("manifest.txt"))?;
    store::write_embedding_matrix(&tm_cfg.vocab_embeddings, &args.out.join("embeddings.saes"))?;
    store::write_vocab(&tm_cfg.vocab_embeddings.vocab, &args.out.join("vocab.txt"))?;
    let gt_json = serde_json::to_string_pretty(&gt)?;
    fs::write(args.out.join("ground_truth.json"), gt_json + "\n")
        .map_err(|e| Error::io(&args.out, e))?;
    write_config_echo(&echo, &args.out.join("gen_config.json"))?;
    println!(
        "gen: {} docs, {} tokens, vocab {} -> {}",
        corpus.documents.len(),
        corpus.documents.len() * echo.len,
        echo.vocab,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainEcho {
    threads: usize,
    features: usize,
    data: String,
    #[serde(flatten)]
    train: TrainConfig,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        lr: pick(args.lr, &cfg, "lr", defaults.lr)?,
        adam_beta1: pick(args.beta1, &cfg, "beta1", defaults.adam_beta1)?,
        adam_beta2: pick(args.beta2, &cfg, "beta2", defaults.adam_beta2)?,
        adam_eps: pick(args.eps, &cfg, "eps", defaults.adam_eps)?,
        epochs: pick(args.epochs, &cfg, "epochs", defaults.epochs)?,
        batch_size: pick(args.batch_size, &cfg, "batch-size", defaults.batch_size)?,
        k_init: pick(args.k_init, &cfg, "k-init", defaults.k_init)?,
        k_final: pick(args.k_final, &cfg, "k-final", defaults.k_final)?,
        k_anneal_fraction: pick(
            args.k_anneal_fraction,
            &cfg,
            "k-anneal-fraction",
            defaults.k_anneal_fraction,
        )?,
        val_fraction: pick(
            args.val_fraction,
            &cfg,
            "val-fraction",
            defaults.val_fraction,
        )?,
        seed: pick_seed(args.common.seed, &cfg)?,
    };
    let echo = TrainEcho {
        threads: pick(args.common.threads, &cfg, "threads", 1)?,
        features: pick(args.features, &cfg, "features", 512)?,
        data: args.data.display().to_string(),
        train: train_cfg.clone(),
    };
    init_threads(echo.threads);

    let shard_store = store::load_store(&args.data)?;
    if let Some(emb_path) = &args.emb {
        // read just the header for the dimension check
        let buf = fs::read(emb_path).map_err(|e| Error::io(emb_path, e))?;
        let mut r = store::ByteReader::new(&buf);
        let (_, emb_dim, _) = store::decode_header(&mut r)?;
        let store_dim = shard_store.dim()?;
        if emb_dim as usize != store_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("shard dim {store_dim}"),
                got: format!("embedding dim {emb_dim}"),
            });
        }
    }

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let (model, report) = sae::train(&shard_store, echo.features, &train_cfg)?;
    sae::save_model(&model, &args.out.join("model.saem"))?;
    let report_json = serde_json::to_string_pretty(&report)?;
    fs::write(args.out.join("train_report.json"), report_json + "\n")
        .map_err(|e| Error::io(&args.out, e))?;
    write_config_echo(&echo, &args.out.join("train_config.json"))?;
    println!(
        "train: {} features over {} rows; val loss {} -> {}",
        echo.features,
        shard_store.total_rows(),
        report.val_losses.first().unwrap_or(&f64::NAN),
        report.val_losses.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct ExplainEcho {
    threads: usize,
    model: String,
    method: String,
    words: usize,
    top_n: usize,
    span_len: usize,
    tau: f64,
    min_emission: Option<f64>,
}

fn parse_feature_ids(raw: &Option<String>, limit: usize) -> Result<Vec<usize>> {
    match raw {
        None => Ok((0..limit).collect()),
        Some(text) => {
            let mut ids = Vec::new();
            for part in text.split(',').filter(|p| !p.trim().is_empty()) {
                let id: usize = part
                    .trim()
                    .parse()
                    .map_err(|_| Error::Malformed(format!("bad feature id {part:?}")))?;
                if id >= limit {
                    return Err(Error::UnknownFeature { id, limit });
                }
                ids.push(id);
            }
            Ok(ids)
        }
    }
}

fn load_summaries(path: &Option<PathBuf>) -> Result<HashMap<usize, String>> {
    let mut map = HashMap::new();
    if let Some(path) = path {
        #[derive(serde::Deserialize)]
        struct Row {
            feature_id: usize,
            summary: String,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: Row = serde_json::from_str(line)?;
            map.insert(row.feature_id, row.summary);
        }
    }
    Ok(map)
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let method = pick(args.method.clone(), &cfg, "method", "mi".to_owned())?;
    let echo = ExplainEcho {
        threads: pick(args.common.threads, &cfg, "threads", 1)?,
        model: args.model.display().to_string(),
        method: method.clone(),
        words: pick(args.words, &cfg, "words", 10)?,
        top_n: pick(args.top_n, &cfg, "top-n", 5)?,
        span_len: pick(args.span_len, &cfg, "span-len", 10)?,
        tau: pick(args.tau, &cfg, "tau", 0.1)?,
        min_emission: match args.min_emission {
            Some(q) => Some(q),
            None => cfg.get::<f64>("min-emission")?,
        },
    };
    init_threads(echo.threads);
    let model = sae::load_model(&args.model)?;
    let ids = parse_feature_ids(&args.feature_ids, model.n_features())?;
    let summaries = load_summaries(&args.summaries)?;

    let mut explanations = Vec::with_capacity(ids.len());
    match method.as_str() {
        "mi" => {
            let (Some(emb_path), Some(vocab_path)) = (&args.emb, &args.vocab) else {
                return Err(Error::InvalidConfig(
                    "method mi needs --emb and --vocab".into(),
                ));
            };
            let emb = store::load_embeddings(emb_path, vocab_path)?;
            let table = explain::mi_scores(&model, &emb)?;
            if let Some(dump) = &args.dump_scores {
                explain::dump_score_table(&table, dump)?;
            }
            for &c in &ids {
                explanations.push(explain::explain_mi(
                    &table,
                    c,
                    echo.words.min(emb.vocab_size()),
                    &emb.vocab,
                    echo.min_emission,
                )?);
            }
        }
        "topact" | "n2g" => {
            let (Some(data), Some(vocab_path)) = (&args.data, &args.vocab) else {
                return Err(Error::InvalidConfig(format!(
                    "method {method} needs --data and --vocab"
                )));
            };
            let shard_store = store::load_store(data)?;
            let text = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
            let token_table: Vec<String> = text.lines().map(|l| l.to_owned()).collect();
            for &c in &ids {
                let mut spans =
                    explain::topact_explain(&model, &shard_store, c, echo.span_len, echo.top_n)?;
                let tag = if method == "n2g" {
                    for span in &mut spans {
                        *span = explain::n2g_refine(span, &shard_store, &model, c, echo.tau)?;
                    }
                    ExplainMethod::N2G
                } else {
                    ExplainMethod::TopAct
                };
                explanations.push(explain::spans_to_explanation(&spans, &token_table, c, tag));
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown method {other:?} (mi|topact|n2g)"
            )))
        }
    }
    for e in &mut explanations {
        if let Some(s) = summaries.get(&e.feature_id) {
            e.summary = Some(s.clone());
        }
    }
    explain::write_explanations(&explanations, &args.out)?;
    let echo_path = args
        .out
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("explain_config.json");
    write_config_echo(&echo, &echo_path)?;
    println!(
        "explain: {} features via {} -> {}",
        explanations.len(),
        method,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SteerEcho {
    threads: usize,
    model: String,
    select: String,
    mode: String,
    alpha: f64,
    beta: f64,
    steps: Option<String>,
}

fn cmd_steer(args: SteerArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let echo = SteerEcho {
        threads: pick(args.common.threads, &cfg, "threads", 1)?,
        model: args.model.display().to_string(),
        select: args.select.clone(),
        mode: pick(args.mode.clone(), &cfg, "mode", "calibrate".to_owned())?,
        alpha: pick(args.alpha, &cfg, "alpha", steer::ERASE_ALPHA)?,
        beta: pick(args.beta, &cfg, "beta", steer::DEFAULT_BETA)?,
        steps: match args.steps.clone() {
            Some(s) => Some(s),
            None => cfg.get::<String>("steps")?,
        },
    };
    init_threads(echo.threads);
    let mode = match echo.mode.as_str() {
        "amplify" => SteerMode::Amplify { alpha: echo.alpha },
        "calibrate" => SteerMode::Calibrate { beta: echo.beta },
        "composite" => {
            let Some(spec) = &echo.steps else {
                return Err(Error::InvalidConfig("composite mode needs --steps".into()));
            };
            steer::parse_steps(spec)?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown mode {other:?} (amplify|calibrate|composite)"
            )))
        }
    };
    let model = sae::load_model(&args.model)?;
    let labels = steer::read_labels(&args.labels)?;
    let subset = steer::select_features(&labels, &args.select, &model)?;
    steer::steer_stream(&args.input, &subset, &mode, &args.out)?;
    write_config_echo(&echo, &args.out.join("steer_config.json"))?;
    println!(
        "steer: {} features labeled {:?} applied to {} -> {}",
        subset.len(),
        args.select,
        args.input.display(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho {
    threads: usize,
    corpus: String,
    model: String,
    #[serde(flatten)]
    experiment: ExperimentConfig,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let defaults = ExperimentConfig::default();
    let min_emission = if args.raw_mi {
        None
    } else {
        match args.min_emission {
            Some(q) => Some(q),
            None => Some(cfg.get::<f64>("min-emission")?.unwrap_or(0.99)),
        }
    };
    let experiment = ExperimentConfig {
        matched_features: pick(args.matched, &cfg, "matched", defaults.matched_features)?,
        words_per_explanation: pick(args.words, &cfg, "words", defaults.words_per_explanation)?,
        spans_per_feature: pick(args.spans, &cfg, "spans", defaults.spans_per_feature)?,
        span_len: pick(args.span_len, &cfg, "span-len", defaults.span_len)?,
        min_emission_quantile: min_emission,
    };
    let echo = EvalEcho {
        threads: pick(args.common.threads, &cfg, "threads", 1)?,
        corpus: args.corpus.display().to_string(),
        model: args.model.display().to_string(),
        experiment: experiment.clone(),
    };
    init_threads(echo.threads);

    let manifest = args.corpus.join("manifest.txt");
    let shard_store = store::load_store(&manifest)?;
    let emb = store::load_embeddings(
        &args.corpus.join("embeddings.saes"),
        &args.corpus.join("vocab.txt"),
    )?;
    let gt_path = args.corpus.join("ground_truth.json");
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gt: topicgen::GroundTruth = serde_json::from_str(&gt_text)?;
    let model = sae::load_model(&args.model)?;
    let dead = match &args.train_report {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let report: sae::TrainReport = serde_json::from_str(&text)?;
            Some(report.dead_features)
        }
    };

    // Inputs are recorded by file name so identical runs in different
    // directories produce byte-identical reports.
    let inputs = vec![
        file_name(&manifest),
        "embeddings.saes".to_owned(),
        "vocab.txt".to_owned(),
        "ground_truth.json".to_owned(),
        file_name(&args.model),
    ];
    let report = run_eval(&shard_store, &emb, &gt, &model, &experiment, dead, inputs)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&args.out, json + "\n").map_err(|e| Error::io(&args.out, e))?;
    let echo_path = args
        .out
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("eval_config.json");
    write_config_echo(&echo, &echo_path)?;
    print!("{}", crate::eval::render_text(&report));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let format = pick(args.format.clone(), &cfg, "format", "text".to_owned())?;
    let text = fs::read_to_string(&args.eval).map_err(|e| Error::io(&args.eval, e))?;
    let report: crate::eval::EvalReport = serde_json::from_str(&text)?;
    let rendered = match format.as_str() {
        "text" => crate::eval::render_text(&report),
        "csv" => crate::eval::render_csv(&report),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown format {other:?} (text|csv)"
            )))
        }
    };
    match &args.out {
        Some(path) => fs::write(path, &rendered).map_err(|e| Error::io(path, e))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 3,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::UnsupportedDtype(_)
        | Error::TruncatedPayload { .. }
        | Error::DimensionMismatch { .. }
        | Error::ShapeMismatch { .. }
        | Error::NonFinite { .. }
        | Error::CountMismatch { .. }
        | Error::DuplicateToken { .. }
        | Error::EmptyVocab
        | Error::UnknownFeature { .. }
        | Error::EmptySelection { .. }
        | Error::UnknownTopic(_)
        | Error::NonFiniteLoss { .. }
        | Error::MissingTrajectory
        | Error::InvalidConfig(_)
        | Error::Malformed(_)
        | Error::Json(_) => 4,
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Steer(a) => cmd_steer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
