//! Explain trained features three ways: the mutual-information word
//! ranking, max-activating spans (TopAct), and masked spans (N2G).
//!
//! Usage:
//!   cargo run --release --example explain_features

use saesteer::explain::{
    explain_mi, mi_scores, n2g_refine, spans_to_explanation, topact_explain, ExplainMethod,
};
use saesteer::sae::{train, TrainConfig};
use saesteer::store::ShardStore;
use saesteer::topicgen::{
    corpus_to_shards, generate_corpus, match_features_to_topics, synthetic_vocab_embeddings,
    TopicModelConfig,
};

fn main() -> saesteer::Result<()> {
    let vocab_size = 800;
    let dim = 24;
    let emb = synthetic_vocab_embeddings(vocab_size, dim, 6, 0.5, 21)?;
    let cfg = TopicModelConfig {
        dim,
        walk_std: 0.02,
        vocab_embeddings: emb,
        doc_length: 48,
        n_docs: 80,
        seed: 21,
        pattern_tokens: ((vocab_size - 6) as u32..vocab_size as u32).collect(),
        pattern_rate: 0.25,
        hidden_noise_std: 0.5,
        ground_truth_words: 40,
    };
    let (corpus, gt) = generate_corpus(&cfg, 4, cfg.n_docs)?;
    let store = ShardStore::new(corpus_to_shards(&corpus, &cfg)?);
    println!("corpus ready: {} tokens", store.total_rows());

    let train_cfg = TrainConfig {
        batch_size: 256,
        epochs: 8,
        k_init: 24,
        k_final: 6,
        seed: 21,
        ..TrainConfig::default()
    };
    let (model, _) = train(&store, 128, &train_cfg)?;
    println!("model trained: {} features", model.n_features());

    // Pick the feature that best matches each topic.
    let matched = match_features_to_topics(&model, &store, &gt.doc_topics, 4)?;
    let vocab = &cfg.vocab_embeddings.vocab;
    let table = mi_scores(&model, &cfg.vocab_embeddings)?;

    for topic in 0..2 {
        let (feature, _) = matched
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| *t == topic)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(c, &(_, s))| (c, s))
            .expect("some feature matches the topic");
        println!("\n=== feature {feature} (matched to topic {topic}) ===");
        println!(
            "ground-truth words: {:?}",
            &gt.top_words[topic][..8.min(gt.top_words[topic].len())]
        );

        let mi = explain_mi(&table, feature, 10, vocab, Some(0.98))?;
        let words: Vec<&str> = mi.items.iter().map(|i| i.text.as_str()).collect();
        println!("MI top-10:     {}", words.join("; "));

        let spans = topact_explain(&model, &store, feature, 10, 5)?;
        let topact = spans_to_explanation(&spans, vocab, feature, ExplainMethod::TopAct);
        println!("TopAct spans:");
        for item in topact.items.iter().take(3) {
            println!("  [{:.2}] {}", item.score, item.text);
        }

        let refined: Vec<_> = spans
            .iter()
            .map(|s| n2g_refine(s, &store, &model, feature, 0.1))
            .collect::<saesteer::Result<_>>()?;
        let n2g = spans_to_explanation(&refined, vocab, feature, ExplainMethod::N2G);
        println!("N2G spans (tau 0.1):");
        for item in n2g.items.iter().take(3) {
            println!("  [{:.2}] {}", item.score, item.text);
        }
    }
    Ok(())
}
