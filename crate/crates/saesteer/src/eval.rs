//! End-to-end comparison of explanation methods on a ground-truth corpus.
//!
//! The experiment: match trained features to topics by mean activation, keep
//! the strongest matches, explain each matched feature with the
//! mutual-information ranking and with the max-activating-span baseline
//! (both its word-level ranking and its raw spans), then score every
//! explanation against the corpus ground truth for topic recovery and
//! pattern leakage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{
    explain_mi, mi_scores, spans_to_explanation, topact_explain, topact_word_ranking, ExplainMethod,
};
use crate::sae::SaeModel;
use crate::store::{EmbeddingMatrix, ShardStore};
use crate::topicgen::{
    distinct_token_ratio, match_features_to_topics, pattern_leakage, topic_recovery_precision,
    GroundTruth,
};

/// Knobs of the evaluation run (not of the model or corpus).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    /// How many best-matched features to score.
    pub matched_features: usize,
    /// Words per word-level explanation (M).
    pub words_per_explanation: usize,
    /// Spans per feature for the span baseline.
    pub spans_per_feature: usize,
    /// Maximum tokens per span.
    pub span_len: usize,
    /// Low-emission filter quantile for the MI ranking.
    pub min_emission_quantile: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            matched_features: 20,
            words_per_explanation: 10,
            spans_per_feature: 5,
            span_len: 10,
            min_emission_quantile: Some(0.99),
        }
    }
}

/// Aggregated scores for one explanation method.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodMetrics {
    pub method: String,
    /// Mean topic recovery precision; absent for raw spans, which are not a
    /// word ranking.
    pub mean_topic_precision: Option<f64>,
    pub mean_pattern_leakage: f64,
    pub mean_distinct_token_ratio: f64,
}

/// One feature chosen for scoring.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatchedFeature {
    pub feature_id: usize,
    pub topic_id: usize,
    pub mean_activation: f64,
}

/// The full evaluation result; serialized as the `eval` subcommand's output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub matched: Vec<MatchedFeature>,
    pub per_method: Vec<MethodMetrics>,
    /// Mean reconstruction loss of the model over the corpus at its K.
    pub reconstruction_loss: f64,
    /// Dead-feature count from training, when a training report was given.
    pub dead_features: Option<usize>,
    /// Input artifacts this report was computed from.
    pub inputs: Vec<String>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.per_method.iter().find(|m| m.method == name)
    }
}

struct Accumulator {
    precision: f64,
    leakage: f64,
    distinct: f64,
    n: usize,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            precision: 0.0,
            leakage: 0.0,
            distinct: 0.0,
            n: 0,
        }
    }

    fn mean(&self, v: f64) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            v / self.n as f64
        }
    }
}

/// Run the experiment. The topic count is taken from the ground truth.
pub fn run_eval(
    store: &ShardStore,
    emb: &EmbeddingMatrix,
    gt: &GroundTruth,
    model: &SaeModel,
    cfg: &ExperimentConfig,
    dead_features: Option<usize>,
    inputs: Vec<String>,
) -> Result<EvalReport> {
    if cfg.matched_features == 0 || cfg.words_per_explanation == 0 {
        return Err(Error::InvalidConfig(
            "matched_features and words_per_explanation must be >= 1".into(),
        ));
    }
    let n_topics = gt.top_words.len();
    let assignments = match_features_to_topics(model, store, &gt.doc_topics, n_topics)?;
    let mut ranked: Vec<MatchedFeature> = assignments
        .iter()
        .enumerate()
        .map(|(c, &(t, s))| MatchedFeature {
            feature_id: c,
            topic_id: t,
            mean_activation: s,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.mean_activation
            .total_cmp(&a.mean_activation)
            .then(a.feature_id.cmp(&b.feature_id))
    });
    ranked.truncate(cfg.matched_features);

    let table = mi_scores(model, emb)?;
    let vocab = &emb.vocab;
    let m = cfg.words_per_explanation;

    let mut mi_acc = Accumulator::new();
    let mut taw_acc = Accumulator::new();
    let mut tas_acc = Accumulator::new();

    for mf in &ranked {
        let (c, t) = (mf.feature_id, mf.topic_id);
        let mi = explain_mi(&table, c, m, vocab, cfg.min_emission_quantile)?;
        mi_acc.precision += topic_recovery_precision(&mi, gt, t, m)?;
        mi_acc.leakage += pattern_leakage(&mi, &gt.pattern_words, m);
        mi_acc.distinct += distinct_token_ratio(&mi, m);
        mi_acc.n += 1;

        let taw = topact_word_ranking(model, store, c, m, vocab)?;
        taw_acc.precision += topic_recovery_precision(&taw, gt, t, m)?;
        taw_acc.leakage += pattern_leakage(&taw, &gt.pattern_words, m);
        taw_acc.distinct += distinct_token_ratio(&taw, m);
        taw_acc.n += 1;

        let spans = topact_explain(model, store, c, cfg.span_len, cfg.spans_per_feature)?;
        let sp = spans_to_explanation(&spans, vocab, c, ExplainMethod::TopAct);
        tas_acc.leakage += pattern_leakage(&sp, &gt.pattern_words, cfg.spans_per_feature);
        tas_acc.distinct += distinct_token_ratio(&sp, cfg.spans_per_feature);
        tas_acc.n += 1;
    }

    let per_method = vec![
        MethodMetrics {
            method: "MI".into(),
            mean_topic_precision: Some(mi_acc.mean(mi_acc.precision)),
            mean_pattern_leakage: mi_acc.mean(mi_acc.leakage),
            mean_distinct_token_ratio: mi_acc.mean(mi_acc.distinct),
        },
        MethodMetrics {
            method: "TopActWords".into(),
            mean_topic_precision: Some(taw_acc.mean(taw_acc.precision)),
            mean_pattern_leakage: taw_acc.mean(taw_acc.leakage),
            mean_distinct_token_ratio: taw_acc.mean(taw_acc.distinct),
        },
        MethodMetrics {
            method: "TopActSpans".into(),
            mean_topic_precision: None,
            mean_pattern_leakage: tas_acc.mean(tas_acc.leakage),
            mean_distinct_token_ratio: tas_acc.mean(tas_acc.distinct),
        },
    ];

    let xs = store.to_matrix()?;
    let acts = crate::sae::encode(model, &xs)?;
    let recon = crate::sae::decode(&acts, model)?;
    let reconstruction_loss = crate::sae::reconstruction_loss(&xs, &recon)?;

    Ok(EvalReport {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        seed: gt.seed,
        config: cfg.clone(),
        matched: ranked,
        per_method,
        reconstruction_loss,
        dead_features,
        inputs,
    })
}

/// Render the report as a fixed-width text table.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "eval report v{} (seed {})\n",
        report.version, report.seed
    ));
    out.push_str(&format!(
        "matched features: {}; reconstruction loss: {}\n",
        report.matched.len(),
        report.reconstruction_loss
    ));
    if let Some(dead) = report.dead_features {
        out.push_str(&format!("dead features: {dead}\n"));
    }
    out.push_str(&format!(
        "{:<14} {:>16} {:>16} {:>16}\n",
        "method", "topic_precision", "pattern_leakage", "distinct_ratio"
    ));
    for m in &report.per_method {
        let p = m
            .mean_topic_precision
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<14} {:>16} {:>16.4} {:>16.4}\n",
            m.method, p, m.mean_pattern_leakage, m.mean_distinct_token_ratio
        ));
    }
    out
}

/// Render the per-method table as CSV; floats round-trip through parse.
pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "method,mean_topic_precision,mean_pattern_leakage,mean_distinct_token_ratio\n",
    );
    for m in &report.per_method {
        let p = m
            .mean_topic_precision
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.method, p, m.mean_pattern_leakage, m.mean_distinct_token_ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_fixture() -> EvalReport {
        EvalReport {
            version: "0.1.0".into(),
            seed: 3,
            config: ExperimentConfig::default(),
            matched: vec![MatchedFeature {
                feature_id: 4,
                topic_id: 1,
                mean_activation: 0.5,
            }],
            per_method: vec![
                MethodMetrics {
                    method: "MI".into(),
                    mean_topic_precision: Some(0.45),
                    mean_pattern_leakage: 0.0125,
                    mean_distinct_token_ratio: 1.0,
                },
                MethodMetrics {
                    method: "TopActSpans".into(),
                    mean_topic_precision: None,
                    mean_pattern_leakage: 0.97,
                    mean_distinct_token_ratio: 0.8,
                },
            ],
            reconstruction_loss: 25.125,
            dead_features: Some(0),
            inputs: vec!["corpus/manifest.txt".into()],
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = report_fixture();
        assert_eq!(render_text(&r), render_text(&r));
        assert_eq!(render_csv(&r), render_csv(&r));
        let json1 = serde_json::to_string_pretty(&r).unwrap();
        let json2 = serde_json::to_string_pretty(&r).unwrap();
        assert_eq!(json1, json2);
        let back: EvalReport = serde_json::from_str(&json1).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_roundtrips_numerically() {
        let r = report_fixture();
        let csv = render_csv(&r);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert_eq!(
            header,
            "method,mean_topic_precision,mean_pattern_leakage,mean_distinct_token_ratio"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "MI");
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.45);
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0125);
        // empty precision cell for span methods
        let row2: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row2[1], "");
    }

    #[test]
    fn empty_method_list_renders_header_only_csv() {
        let mut r = report_fixture();
        r.per_method.clear();
        let csv = render_csv(&r);
        assert_eq!(
            csv,
            "method,mean_topic_precision,mean_pattern_leakage,mean_distinct_token_ratio\n"
        );
    }
}
