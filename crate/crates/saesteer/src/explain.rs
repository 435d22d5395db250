//! Per-feature explanations.
//!
//! The primary method ranks vocabulary words by the mutual-information score
//! `p(w | W_c) * ln p(W_c | w)`, where both conditionals are softmaxes of the
//! word-embedding / feature-row dot products: the first normalizes over the
//! vocabulary, the second over the features. Normalizing a word across all
//! features is what suppresses words that light up everything.
//!
//! Two span baselines are included for comparison: TopAct (max-activating
//! corpus spans per feature) and N2G (TopAct spans with low-contribution
//! tokens masked).
//!
//! Explanations serialize as JSON Lines:
//! `{"feature_id":int,"method":"MI|TopAct|N2G","items":[{"text":str,"score":float}],"summary":str|null}`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, dot_f32, log_sum_exp, softmax_in_place, DenseMatrix};
use crate::sae::SaeModel;
use crate::store::{EmbeddingMatrix, ShardStore};

/// Which explainer produced an explanation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExplainMethod {
    #[serde(rename = "MI")]
    Mi,
    TopAct,
    N2G,
}

impl std::fmt::Display for ExplainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExplainMethod::Mi => write!(f, "MI"),
            ExplainMethod::TopAct => write!(f, "TopAct"),
            ExplainMethod::N2G => write!(f, "N2G"),
        }
    }
}

/// Dense per-feature, per-word score table.
///
/// `scores[c][w] = p(w|W_c) * ln p(W_c|w)`; every entry is <= 0 because the
/// log factor is. `emission` keeps the underlying `p(w|W_c)` rows for
/// optional low-emission filtering.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub scores: DenseMatrix,
    pub emission: DenseMatrix,
    pub method: ExplainMethod,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExplanationItem {
    pub text: String,
    pub score: f64,
}

/// A ranked explanation for one feature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Explanation {
    pub feature_id: usize,
    pub method: ExplainMethod,
    /// Sorted by score descending, ties by token id ascending.
    pub items: Vec<ExplanationItem>,
    /// Externally supplied free-text summary, passed through untouched.
    pub summary: Option<String>,
}

/// A max-activating text span for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanRecord {
    pub doc_id: u32,
    /// Global row index of the window's first token.
    pub start_row: usize,
    pub token_ids: Vec<u32>,
    /// Offset of the peak token inside the window.
    pub peak_offset: usize,
    /// Feature activation at the peak token.
    pub activation: f64,
    /// Per-position mask flags once N2G refinement ran.
    pub masked: Option<Vec<bool>>,
}

fn check_dims(model: &SaeModel, emb_dim: usize) -> Result<()> {
    if model.dim() != emb_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding dim {}", model.dim()),
            got: format!("{emb_dim}"),
        });
    }
    Ok(())
}

fn emb_rows_f64(emb: &EmbeddingMatrix) -> DenseMatrix {
    DenseMatrix::from_vec(
        emb.vocab_size(),
        emb.dim,
        emb.data.iter().map(|&v| v as f64).collect(),
    )
}

/// `p(w | W_c)`: softmax over the vocabulary of `<e_w, W_c>`.
pub fn word_given_feature(model: &SaeModel, emb: &EmbeddingMatrix, c: usize) -> Result<Vec<f64>> {
    check_dims(model, emb.dim)?;
    if c >= model.n_features() {
        return Err(Error::UnknownFeature {
            id: c,
            limit: model.n_features(),
        });
    }
    let w_c = model.feature(c);
    let mut logits: Vec<f64> = (0..emb.vocab_size())
        .map(|w| dot_f32(emb.row(w), w_c))
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// `p(W_c | w)`: softmax over all features of `<e_w, W_c>`.
pub fn feature_given_word(model: &SaeModel, emb: &EmbeddingMatrix, w: usize) -> Result<Vec<f64>> {
    check_dims(model, emb.dim)?;
    if w >= emb.vocab_size() {
        return Err(Error::UnknownFeature {
            id: w,
            limit: emb.vocab_size(),
        });
    }
    let e_w: Vec<f64> = emb.row(w).iter().map(|&v| v as f64).collect();
    let mut logits: Vec<f64> = (0..model.n_features())
        .map(|c| dot(&e_w, model.feature(c)))
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Full mutual-information score table.
///
/// `ln p(W_c|w)` is computed as `logit - logsumexp(column)` rather than
/// `ln(softmax)`, so no entry underflows to `-inf`.
pub fn mi_scores(model: &SaeModel, emb: &EmbeddingMatrix) -> Result<ScoreTable> {
    check_dims(model, emb.dim)?;
    let c_n = model.n_features();
    let v_n = emb.vocab_size();
    if v_n == 0 {
        return Err(Error::EmptyVocab);
    }
    let e = emb_rows_f64(emb);

    // logits[c][w] = <e_w, W_c>
    let mut logits = DenseMatrix::zeros(c_n, v_n);
    logits
        .data
        .par_chunks_mut(v_n)
        .enumerate()
        .for_each(|(c, row)| {
            let w_c = model.feature(c);
            for (w, slot) in row.iter_mut().enumerate() {
                *slot = dot(e.row(w), w_c);
            }
        });

    // Column log-sum-exp over features, for ln p(W_c | w).
    let mut col_lse = vec![0.0f64; v_n];
    {
        let mut col = vec![0.0f64; c_n];
        for w in 0..v_n {
            for c in 0..c_n {
                col[c] = logits.data[c * v_n + w];
            }
            col_lse[w] = log_sum_exp(&col);
        }
    }

    let mut emission = logits.clone();
    emission.data.par_chunks_mut(v_n).for_each(|row| {
        softmax_in_place(row);
    });

    let mut scores = DenseMatrix::zeros(c_n, v_n);
    scores
        .data
        .par_chunks_mut(v_n)
        .enumerate()
        .for_each(|(c, row)| {
            for w in 0..v_n {
                let log_fgw = logits.data[c * v_n + w] - col_lse[w];
                row[w] = emission.data[c * v_n + w] * log_fgw;
            }
        });
    for v in &scores.data {
        if !v.is_finite() {
            return Err(Error::Malformed("non-finite score entry".into()));
        }
    }
    Ok(ScoreTable {
        scores,
        emission,
        method: ExplainMethod::Mi,
    })
}

/// Top-M words for feature `c` by mutual-information score.
///
/// Scores are additive over the word set, so the greedy top-M is exact.
/// Ties break toward the lower token id. `min_emission_quantile`, when set,
/// drops words whose emission probability lies below that quantile of
/// `p(w|W_c)` before ranking; it defaults to off to keep the raw objective.
pub fn explain_mi(
    table: &ScoreTable,
    c: usize,
    m: usize,
    vocab: &[String],
    min_emission_quantile: Option<f64>,
) -> Result<Explanation> {
    if c >= table.scores.rows {
        return Err(Error::UnknownFeature {
            id: c,
            limit: table.scores.rows,
        });
    }
    let v_n = table.scores.cols;
    if m > v_n {
        return Err(Error::InvalidConfig(format!(
            "requested {m} words from a vocabulary of {v_n}"
        )));
    }
    if vocab.len() != v_n {
        return Err(Error::CountMismatch {
            matrix_rows: v_n,
            vocab_lines: vocab.len(),
        });
    }
    let row = table.scores.row(c);
    let emission = table.emission.row(c);

    let mut candidates: Vec<usize> = match min_emission_quantile {
        None => (0..v_n).collect(),
        Some(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidConfig(
                    "min-emission quantile must lie in [0, 1]".into(),
                ));
            }
            let mut sorted: Vec<f64> = emission.to_vec();
            sorted.sort_by(f64::total_cmp);
            let rank = (q * (v_n as f64 - 1.0)).round() as usize;
            let threshold = sorted[rank];
            (0..v_n).filter(|&w| emission[w] >= threshold).collect()
        }
    };
    candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let m = m.min(candidates.len());
    let items = candidates[..m]
        .iter()
        .map(|&w| ExplanationItem {
            text: vocab[w].clone(),
            score: row[w],
        })
        .collect();
    Ok(Explanation {
        feature_id: c,
        method: ExplainMethod::Mi,
        items,
        summary: None,
    })
}

// ---------------------------------------------------------------------------
// Span baselines
// ---------------------------------------------------------------------------

/// Maximal runs of identical doc id in global row order; a run is treated as
/// one document's contiguous token range `[start, end)`.
pub(crate) fn doc_runs(store: &ShardStore) -> Vec<(u32, usize, usize)> {
    let mut runs = Vec::new();
    let mut global = 0usize;
    let mut current: Option<(u32, usize)> = None;
    for shard in &store.shards {
        for &doc in &shard.doc_ids {
            match current {
                Some((d, _)) if d == doc => {}
                Some((d, s)) => {
                    runs.push((d, s, global));
                    current = Some((doc, global));
                }
                None => current = Some((doc, global)),
            }
            global += 1;
        }
    }
    if let Some((d, s)) = current {
        runs.push((d, s, global));
    }
    runs
}

fn feature_activations(model: &SaeModel, store: &ShardStore, c: usize) -> Result<Vec<f64>> {
    if c >= model.n_features() {
        return Err(Error::UnknownFeature {
            id: c,
            limit: model.n_features(),
        });
    }
    check_dims(model, store.dim()?)?;
    let w_c = model.feature(c);
    let mut acts = Vec::with_capacity(store.total_rows());
    for shard in &store.shards {
        for i in 0..shard.n_rows() {
            acts.push(dot_f32(shard.row(i), w_c).max(0.0));
        }
    }
    Ok(acts)
}

/// Max-activating spans: per document, the window (at most `span_len`
/// tokens, centered on the document's peak token, clipped at the document
/// bounds) around the highest activation; the `top_n` documents with the
/// strongest peaks win. Documents that never activate the feature are
/// skipped.
pub fn topact_explain(
    model: &SaeModel,
    store: &ShardStore,
    c: usize,
    span_len: usize,
    top_n: usize,
) -> Result<Vec<SpanRecord>> {
    if span_len == 0 {
        return Err(Error::InvalidConfig("span_len must be >= 1".into()));
    }
    let acts = feature_activations(model, store, c)?;

    // Best run peak per document.
    let mut best: HashMap<u32, (f64, usize, usize, usize)> = HashMap::new();
    for (doc, start, end) in doc_runs(store) {
        let mut peak_row = start;
        let mut peak = f64::NEG_INFINITY;
        for r in start..end {
            if acts[r] > peak {
                peak = acts[r];
                peak_row = r;
            }
        }
        if peak <= 0.0 {
            continue;
        }
        let entry = best.entry(doc).or_insert((peak, peak_row, start, end));
        if peak > entry.0 {
            *entry = (peak, peak_row, start, end);
        }
    }

    let mut ranked: Vec<(u32, (f64, usize, usize, usize))> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(a.0.cmp(&b.0)));
    ranked.truncate(top_n);

    let mut spans = Vec::with_capacity(ranked.len());
    for (doc, (peak, peak_row, start, end)) in ranked {
        let w_start = peak_row.saturating_sub((span_len - 1) / 2).max(start);
        let w_end = (w_start + span_len).min(end);
        let token_ids: Vec<u32> = (w_start..w_end).map(|r| store.token_id(r)).collect();
        spans.push(SpanRecord {
            doc_id: doc,
            start_row: w_start,
            token_ids,
            peak_offset: peak_row - w_start,
            activation: peak,
            masked: None,
        });
    }
    Ok(spans)
}

/// N2G-style refinement: zero each span token's activation row in turn and
/// measure how much the span's maximum activation drops; tokens whose removal
/// drops it by less than `tau` times the original peak get masked.
///
/// Without a language model to re-run, zeroing the stored activation row is
/// the context-free stand-in for removing the token.
pub fn n2g_refine(
    span: &SpanRecord,
    store: &ShardStore,
    model: &SaeModel,
    c: usize,
    tau: f64,
) -> Result<SpanRecord> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig("tau must lie in [0, 1]".into()));
    }
    if c >= model.n_features() {
        return Err(Error::UnknownFeature {
            id: c,
            limit: model.n_features(),
        });
    }
    let w_c = model.feature(c);
    let n = span.token_ids.len();
    let acts: Vec<f64> = (0..n)
        .map(|i| dot_f32(store.row(span.start_row + i), w_c).max(0.0))
        .collect();
    let original = acts.iter().cloned().fold(0.0f64, f64::max);
    let mut masked = vec![false; n];
    for i in 0..n {
        // zeroed row activates at relu(0) = 0
        let new_max = acts
            .iter()
            .enumerate()
            .map(|(j, &a)| if j == i { 0.0 } else { a })
            .fold(0.0f64, f64::max);
        let drop = original - new_max;
        if drop < tau * original {
            masked[i] = true;
        }
    }
    Ok(SpanRecord {
        masked: Some(masked),
        ..span.clone()
    })
}

/// Word-level projection of the span baseline: rank vocabulary words by the
/// maximum activation the feature reaches on any corpus occurrence of the
/// word. Words that never occur (or never activate) are excluded.
pub fn topact_word_ranking(
    model: &SaeModel,
    store: &ShardStore,
    c: usize,
    m: usize,
    token_table: &[String],
) -> Result<Explanation> {
    let acts = feature_activations(model, store, c)?;
    let mut best: HashMap<u32, f64> = HashMap::new();
    let mut global = 0usize;
    for shard in &store.shards {
        for &tok in &shard.token_ids {
            let e = best.entry(tok).or_insert(0.0);
            if acts[global] > *e {
                *e = acts[global];
            }
            global += 1;
        }
    }
    let mut ranked: Vec<(u32, f64)> = best.into_iter().filter(|(_, a)| *a > 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(m);
    let items = ranked
        .into_iter()
        .map(|(tok, a)| ExplanationItem {
            text: token_table
                .get(tok as usize)
                .cloned()
                .unwrap_or_else(|| format!("<{tok}>")),
            score: a,
        })
        .collect();
    Ok(Explanation {
        feature_id: c,
        method: ExplainMethod::TopAct,
        items,
        summary: None,
    })
}

/// Render spans as a JSONL-ready explanation; masked positions print as
/// `[MASK]`.
pub fn spans_to_explanation(
    spans: &[SpanRecord],
    token_table: &[String],
    feature_id: usize,
    method: ExplainMethod,
) -> Explanation {
    let items = spans
        .iter()
        .map(|s| {
            let words: Vec<String> = s
                .token_ids
                .iter()
                .enumerate()
                .map(|(i, &tok)| {
                    let masked = s.masked.as_ref().map(|m| m[i]).unwrap_or(false);
                    if masked {
                        "[MASK]".to_owned()
                    } else {
                        token_table
                            .get(tok as usize)
                            .cloned()
                            .unwrap_or_else(|| format!("<{tok}>"))
                    }
                })
                .collect();
            ExplanationItem {
                text: words.join(" "),
                score: s.activation,
            }
        })
        .collect();
    Explanation {
        feature_id,
        method,
        items,
        summary: None,
    }
}

/// Corpus vocabulary: distinct token ids with frequency >= `min_count`,
/// excluding the given token strings, sorted by id.
pub fn build_vocab(
    store: &ShardStore,
    token_table: &[String],
    min_count: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<(u32, String)>> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for shard in &store.shards {
        for &tok in &shard.token_ids {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(u32, String)> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_count)
        .map(|(tok, _)| {
            let text = token_table
                .get(tok as usize)
                .cloned()
                .unwrap_or_else(|| format!("<{tok}>"));
            (tok, text)
        })
        .filter(|(_, text)| !exclude.contains(text))
        .collect();
    kept.sort_by_key(|(tok, _)| *tok);
    if kept.is_empty() {
        return Err(Error::EmptyVocab);
    }
    Ok(kept)
}

/// Dump the score table into the shard container for auditing (rows =
/// features, columns = vocabulary words).
pub fn dump_score_table(table: &ScoreTable, path: &Path) -> Result<()> {
    let data: Vec<f32> = table.scores.data.iter().map(|&v| v as f32).collect();
    crate::store::write_f32_matrix(
        table.scores.rows,
        table.scores.cols,
        &data,
        "mi_scores",
        path,
    )
}

/// Write explanations as JSON Lines.
pub fn write_explanations(explanations: &[Explanation], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in explanations {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_explanations(path: &Path) -> Result<Vec<Explanation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}
