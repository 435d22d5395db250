//! Synthetic topic-model corpus with known ground truth.
//!
//! Each document follows a discourse vector doing a slow Gaussian random
//! walk from a per-topic seed direction; at every step a token is sampled
//! from the softmax of vocabulary-embedding dot products against the current
//! discourse vector. A configurable fraction of positions is replaced by
//! uniformly chosen high-frequency pattern tokens, which is what gives span
//! explainers something repetitive to latch onto.
//!
//! Hidden states superpose the discourse and word components,
//! `h_n = e_{c_n} + e_{x_n} + noise`, so a faithful dictionary has to spend
//! features on both. The generator records everything needed to score
//! explanations afterwards: topic seeds, per-topic top emission words, the
//! document-to-topic map, and the injected pattern words.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::explain::Explanation;
use crate::math::{dot, dot_f32, log_sum_exp, mix_seed, softmax_in_place, DenseMatrix};
use crate::sae::SaeModel;
use crate::store::{ActivationShard, EmbeddingMatrix, ShardStore};

const STREAM_TOPICS: u64 = 0x1093;
const STREAM_DOCS: u64 = 0xD0C5;
const STREAM_HIDDEN: u64 = 0xE7A1;

/// Maximum pairwise dot product allowed between topic seed directions.
const TOPIC_SEPARATION: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct TopicModelConfig {
    /// Discourse/embedding dimension d.
    pub dim: usize,
    /// Standard deviation of each random-walk step coordinate.
    pub walk_std: f64,
    /// Word embeddings used for emission; row v is e_v.
    pub vocab_embeddings: EmbeddingMatrix,
    /// Tokens per document.
    pub doc_length: usize,
    /// Documents per topic.
    pub n_docs: usize,
    pub seed: u64,
    /// Token ids injected as high-frequency linguistic patterns.
    pub pattern_tokens: Vec<u32>,
    /// Probability that a position is replaced by a pattern token.
    pub pattern_rate: f64,
    /// Standard deviation of the additive hidden-state noise.
    pub hidden_noise_std: f64,
    /// Size of each topic's ground-truth word list.
    pub ground_truth_words: usize,
}

impl TopicModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walk_std < 0.0 || !self.walk_std.is_finite() {
            return Err(Error::InvalidConfig("walk_std must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.pattern_rate) {
            return Err(Error::InvalidConfig(
                "pattern_rate must be in [0, 1]".into(),
            ));
        }
        if self.hidden_noise_std < 0.0 {
            return Err(Error::InvalidConfig("hidden_noise_std must be >= 0".into()));
        }
        if self.vocab_embeddings.dim != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("embedding dim {}", self.dim),
                got: format!("{}", self.vocab_embeddings.dim),
            });
        }
        if self.pattern_rate > 0.0 && self.pattern_tokens.is_empty() {
            return Err(Error::InvalidConfig(
                "pattern_rate > 0 needs pattern_tokens".into(),
            ));
        }
        for &t in &self.pattern_tokens {
            if t as usize >= self.vocab_embeddings.vocab_size() {
                return Err(Error::UnknownFeature {
                    id: t as usize,
                    limit: self.vocab_embeddings.vocab_size(),
                });
            }
        }
        if self.ground_truth_words > self.vocab_embeddings.vocab_size() {
            return Err(Error::InvalidConfig(
                "ground_truth_words exceeds vocabulary size".into(),
            ));
        }
        Ok(())
    }
}

/// Synthetic vocabulary: i.i.d. normal embeddings scaled by `scale`; the
/// last `n_pattern` entries are named `pat*` and serve as pattern tokens.
pub fn synthetic_vocab_embeddings(
    vocab_size: usize,
    dim: usize,
    n_pattern: usize,
    scale: f64,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if n_pattern > vocab_size {
        return Err(Error::InvalidConfig(
            "more pattern tokens than vocabulary entries".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE3B, 0));
    let data: Vec<f32> = (0..vocab_size * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        })
        .collect();
    let regular = vocab_size - n_pattern;
    let vocab: Vec<String> = (0..vocab_size)
        .map(|i| {
            if i < regular {
                format!("w{i:04}")
            } else {
                format!("pat{}", i - regular)
            }
        })
        .collect();
    Ok(EmbeddingMatrix { dim, data, vocab })
}

/// One generated document: tokens, the full discourse trajectory
/// (`doc_length + 1` vectors, entry 0 is the topic seed), and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDocument {
    pub doc_id: u32,
    pub topic_id: usize,
    pub tokens: Vec<u32>,
    pub trajectory: Vec<Vec<f64>>,
    pub doc_seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub documents: Vec<SyntheticDocument>,
    pub n_topics: usize,
}

/// Ground truth for scoring explanations, serialized next to the corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruth {
    pub topic_seeds: Vec<Vec<f64>>,
    /// Per topic: the `ground_truth_words` vocabulary words with the highest
    /// emission probability under the topic seed, best first.
    pub top_words: Vec<Vec<String>>,
    /// Document id -> topic id.
    pub doc_topics: Vec<usize>,
    pub pattern_words: Vec<String>,
    pub seed: u64,
}

/// Derive the per-document generator seed; generation order never matters.
pub fn doc_seed(corpus_seed: u64, topic: usize, index: usize) -> u64 {
    mix_seed(
        corpus_seed,
        STREAM_DOCS.wrapping_add(topic as u64),
        index as u64,
    )
}

fn sample_document_inner(
    cfg: &TopicModelConfig,
    emb64: &DenseMatrix,
    topic_seed_vector: &[f64],
    topic_id: usize,
    doc_id: u32,
    doc_seed_value: u64,
    rng: &mut ChaCha8Rng,
) -> SyntheticDocument {
    let n = cfg.doc_length;
    let d = cfg.dim;
    let v = emb64.rows;
    let mut trajectory = Vec::with_capacity(n + 1);
    trajectory.push(topic_seed_vector.to_vec());
    let mut tokens = Vec::with_capacity(n);
    let mut logits = vec![0.0f64; v];
    for _ in 0..n {
        let prev = trajectory.last().unwrap();
        let mut next = Vec::with_capacity(d);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            next.push(prev[j] + cfg.walk_std * z);
        }
        let coin: f64 = rng.random();
        let token = if coin < cfg.pattern_rate {
            cfg.pattern_tokens[rng.random_range(0..cfg.pattern_tokens.len())]
        } else {
            for (w, slot) in logits.iter_mut().enumerate() {
                *slot = dot(emb64.row(w), &next);
            }
            softmax_in_place(&mut logits);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut picked = v - 1;
            for (w, &p) in logits.iter().enumerate() {
                acc += p;
                if u < acc {
                    picked = w;
                    break;
                }
            }
            picked as u32
        };
        tokens.push(token);
        trajectory.push(next);
    }
    SyntheticDocument {
        doc_id,
        topic_id,
        tokens,
        trajectory,
        doc_seed: doc_seed_value,
    }
}

/// Sample one document: the discourse vector starts at `topic_seed_vector`
/// and takes `N(0, walk_std^2 I)` steps; each position emits from the
/// softmax over `<e_v, e_{c_n}>`, except pattern replacements.
pub fn sample_document(
    cfg: &TopicModelConfig,
    topic_seed_vector: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticDocument> {
    cfg.validate()?;
    if topic_seed_vector.len() != cfg.dim {
        return Err(Error::ShapeMismatch {
            expected: format!("seed vector of dim {}", cfg.dim),
            got: format!("{}", topic_seed_vector.len()),
        });
    }
    let emb64 = DenseMatrix::from_vec(
        cfg.vocab_embeddings.vocab_size(),
        cfg.dim,
        cfg.vocab_embeddings
            .data
            .iter()
            .map(|&x| x as f64)
            .collect(),
    );
    Ok(sample_document_inner(
        cfg,
        &emb64,
        topic_seed_vector,
        0,
        0,
        0,
        rng,
    ))
}

/// Log-density of a document under the pure generative model
/// (`pattern_rate` must be 0): per-step emission log-softmax plus the
/// transition term `-ln(sqrt(2 pi) sigma) - ||step||_2 / (2 sigma)`, taken
/// as written with the plain (unsquared) step norm.
pub fn log_prob(doc: &SyntheticDocument, cfg: &TopicModelConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.pattern_rate != 0.0 {
        return Err(Error::InvalidConfig(
            "log_prob is defined for the pure model (pattern_rate = 0)".into(),
        ));
    }
    if doc.trajectory.len() != doc.tokens.len() + 1 {
        return Err(Error::MissingTrajectory);
    }
    if doc.tokens.is_empty() {
        return Ok(0.0);
    }
    if cfg.walk_std <= 0.0 {
        return Err(Error::InvalidConfig("log_prob needs walk_std > 0".into()));
    }
    let emb = &cfg.vocab_embeddings;
    let mut total = 0.0;
    let mut logits = vec![0.0f64; emb.vocab_size()];
    for (n, &tok) in doc.tokens.iter().enumerate() {
        let here = &doc.trajectory[n + 1];
        let prev = &doc.trajectory[n];
        for (w, slot) in logits.iter_mut().enumerate() {
            *slot = dot_f32(emb.row(w), here);
        }
        let lse = log_sum_exp(&logits);
        total += logits[tok as usize] - lse;

        let step_norm = crate::math::dist2(here, prev).sqrt();
        total += -(f64::sqrt(2.0 * std::f64::consts::PI) * cfg.walk_std).ln()
            - step_norm / (2.0 * cfg.walk_std);
    }
    Ok(total)
}

/// Hidden states for a document: `h_n = e_{c_n} + e_{x_n} + noise`, with the
/// noise stream derived from the document seed so re-emission is
/// deterministic.
pub fn emit_hidden_states(
    doc: &SyntheticDocument,
    cfg: &TopicModelConfig,
) -> Result<ActivationShard> {
    cfg.validate()?;
    if doc.trajectory.len() != doc.tokens.len() + 1 {
        return Err(Error::MissingTrajectory);
    }
    let d = cfg.dim;
    let emb = &cfg.vocab_embeddings;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(doc.doc_seed, STREAM_HIDDEN, 0));
    let mut data = Vec::with_capacity(doc.tokens.len() * d);
    for (n, &tok) in doc.tokens.iter().enumerate() {
        let disc = &doc.trajectory[n + 1];
        let word = emb.row(tok as usize);
        for j in 0..d {
            let eta: f64 = StandardNormal.sample(&mut noise_rng);
            let h = disc[j] + word[j] as f64 + cfg.hidden_noise_std * eta;
            data.push(h as f32);
        }
    }
    Ok(ActivationShard {
        dim: d,
        data,
        token_ids: doc.tokens.clone(),
        doc_ids: vec![doc.doc_id; doc.tokens.len()],
        layer_tag: format!("topic{}", doc.topic_id),
    })
}

fn draw_topic_seeds(cfg: &TopicModelConfig, n_topics: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_TOPICS, 0));
    let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(n_topics);
    let mut attempts = 0usize;
    while seeds.len() < n_topics {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidConfig(format!(
                "could not place {n_topics} topic seeds with pairwise dot < {TOPIC_SEPARATION}"
            )));
        }
        let mut v: Vec<f64> = (0..cfg.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-9 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        if seeds.iter().all(|s| dot(s, &v) < TOPIC_SEPARATION) {
            seeds.push(v);
        }
    }
    Ok(seeds)
}

fn top_emission_words(cfg: &TopicModelConfig, seed_vec: &[f64]) -> Vec<String> {
    let emb = &cfg.vocab_embeddings;
    let mut scored: Vec<(usize, f64)> = (0..emb.vocab_size())
        .map(|w| (w, dot_f32(emb.row(w), seed_vec)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(cfg.ground_truth_words)
        .map(|(w, _)| emb.vocab[w].clone())
        .collect()
}

/// Generate the full corpus: per-topic unit-norm seed directions (rejection
/// sampled to pairwise dot < 0.3), independently seeded documents, and the
/// ground truth needed to evaluate explanations later.
pub fn generate_corpus(
    cfg: &TopicModelConfig,
    n_topics: usize,
    docs_per_topic: usize,
) -> Result<(SyntheticCorpus, GroundTruth)> {
    cfg.validate()?;
    if n_topics == 0 {
        return Err(Error::InvalidConfig("n_topics must be >= 1".into()));
    }
    let seeds = draw_topic_seeds(cfg, n_topics)?;
    let emb64 = DenseMatrix::from_vec(
        cfg.vocab_embeddings.vocab_size(),
        cfg.dim,
        cfg.vocab_embeddings
            .data
            .iter()
            .map(|&x| x as f64)
            .collect(),
    );

    let jobs: Vec<(usize, usize)> = (0..n_topics)
        .flat_map(|t| (0..docs_per_topic).map(move |j| (t, j)))
        .collect();
    let documents: Vec<SyntheticDocument> = jobs
        .par_iter()
        .map(|&(t, j)| {
            let ds = doc_seed(cfg.seed, t, j);
            let mut rng = ChaCha8Rng::seed_from_u64(ds);
            sample_document_inner(
                cfg,
                &emb64,
                &seeds[t],
                t,
                (t * docs_per_topic + j) as u32,
                ds,
                &mut rng,
            )
        })
        .collect();

    let top_words = seeds.iter().map(|s| top_emission_words(cfg, s)).collect();
    let doc_topics = documents.iter().map(|d| d.topic_id).collect();
    let pattern_words = cfg
        .pattern_tokens
        .iter()
        .map(|&t| cfg.vocab_embeddings.vocab[t as usize].clone())
        .collect();
    Ok((
        SyntheticCorpus {
            documents,
            n_topics,
        },
        GroundTruth {
            topic_seeds: seeds,
            top_words,
            doc_topics,
            pattern_words,
            seed: cfg.seed,
        },
    ))
}

/// Emit hidden states for every document, one shard per topic.
pub fn corpus_to_shards(
    corpus: &SyntheticCorpus,
    cfg: &TopicModelConfig,
) -> Result<Vec<ActivationShard>> {
    let mut per_topic: Vec<Vec<&SyntheticDocument>> = vec![Vec::new(); corpus.n_topics];
    for doc in &corpus.documents {
        per_topic[doc.topic_id].push(doc);
    }
    let mut shards = Vec::with_capacity(corpus.n_topics);
    for docs in per_topic {
        let mut dim = cfg.dim;
        let mut data = Vec::new();
        let mut token_ids = Vec::new();
        let mut doc_ids = Vec::new();
        let mut tag = String::new();
        for doc in docs {
            let s = emit_hidden_states(doc, cfg)?;
            dim = s.dim;
            data.extend_from_slice(&s.data);
            token_ids.extend_from_slice(&s.token_ids);
            doc_ids.extend_from_slice(&s.doc_ids);
            tag = s.layer_tag;
        }
        shards.push(ActivationShard {
            dim,
            data,
            token_ids,
            doc_ids,
            layer_tag: tag,
        });
    }
    Ok(shards)
}

// ---------------------------------------------------------------------------
// Evaluation against ground truth
// ---------------------------------------------------------------------------

/// Fraction of the explanation's top-M words that appear in the topic's
/// ground-truth word list. Fewer than M items count as misses.
pub fn topic_recovery_precision(
    explanation: &Explanation,
    ground_truth: &GroundTruth,
    topic_id: usize,
    m: usize,
) -> Result<f64> {
    let Some(words) = ground_truth.top_words.get(topic_id) else {
        return Err(Error::UnknownTopic(topic_id));
    };
    if m == 0 {
        return Ok(0.0);
    }
    let truth: std::collections::HashSet<&str> = words.iter().map(|s| s.as_str()).collect();
    let hits = explanation
        .items
        .iter()
        .take(m)
        .filter(|item| truth.contains(item.text.as_str()))
        .count();
    Ok(hits as f64 / m as f64)
}

/// Fraction of the first `m` items contaminated by pattern words. A
/// single-word item leaks when it is a pattern word; a span item leaks when
/// any of its whitespace-separated tokens is one.
pub fn pattern_leakage(explanation: &Explanation, pattern_words: &[String], m: usize) -> f64 {
    let patterns: std::collections::HashSet<&str> =
        pattern_words.iter().map(|s| s.as_str()).collect();
    let considered: Vec<&crate::explain::ExplanationItem> =
        explanation.items.iter().take(m).collect();
    if considered.is_empty() {
        return 0.0;
    }
    let leaked = considered
        .iter()
        .filter(|item| {
            item.text
                .split_whitespace()
                .any(|tok| patterns.contains(tok))
        })
        .count();
    leaked as f64 / considered.len() as f64
}

/// Distinct-token ratio over the first `m` items (tokens are the
/// whitespace-separated pieces of each item's text).
pub fn distinct_token_ratio(explanation: &Explanation, m: usize) -> f64 {
    let mut total = 0usize;
    let mut distinct = std::collections::HashSet::new();
    for item in explanation.items.iter().take(m) {
        for tok in item.text.split_whitespace() {
            total += 1;
            distinct.insert(tok);
        }
    }
    if total == 0 {
        return 0.0;
    }
    distinct.len() as f64 / total as f64
}

/// Assign each feature to the topic with the highest mean activation over
/// that topic's tokens (ties toward the lower topic id). Returns
/// `(topic, mean activation)` per feature.
pub fn match_features_to_topics(
    model: &SaeModel,
    store: &ShardStore,
    doc_topics: &[usize],
    n_topics: usize,
) -> Result<Vec<(usize, f64)>> {
    let c_n = model.n_features();
    let mut token_counts = vec![0usize; n_topics];
    let mut rows_by_topic: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    let mut global = 0usize;
    for shard in &store.shards {
        for &doc in &shard.doc_ids {
            let topic = *doc_topics
                .get(doc as usize)
                .ok_or(Error::UnknownTopic(doc as usize))?;
            rows_by_topic[topic].push(global);
            token_counts[topic] += 1;
            global += 1;
        }
    }
    let results: Vec<(usize, f64)> = (0..c_n)
        .into_par_iter()
        .map(|c| {
            let w_c = model.feature(c);
            let mut best_topic = 0usize;
            let mut best_mean = f64::NEG_INFINITY;
            for t in 0..n_topics {
                if token_counts[t] == 0 {
                    continue;
                }
                let mut sum = 0.0;
                for &r in &rows_by_topic[t] {
                    sum += dot_f32(store.row(r), w_c).max(0.0);
                }
                let mean = sum / token_counts[t] as f64;
                if mean > best_mean {
                    best_mean = mean;
                    best_topic = t;
                }
            }
            (best_topic, best_mean)
        })
        .collect();
    Ok(results)
}
