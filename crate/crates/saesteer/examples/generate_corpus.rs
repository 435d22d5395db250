//! Generate a synthetic topic-model corpus and inspect what it contains.
//!
//! Documents follow a discourse vector on a slow random walk from a
//! per-topic seed direction; tokens come from a softmax over vocabulary
//! embeddings, with a fraction of positions replaced by high-frequency
//! pattern tokens. The generator also records the ground truth needed to
//! score explanations later.
//!
//! Usage:
//!   cargo run --release --example generate_corpus

use saesteer::topicgen::{generate_corpus, synthetic_vocab_embeddings, TopicModelConfig};

fn main() -> saesteer::Result<()> {
    let vocab_size = 500;
    let dim = 16;
    let n_pattern = 5;
    let emb = synthetic_vocab_embeddings(vocab_size, dim, n_pattern, 0.5, 42)?;
    let cfg = TopicModelConfig {
        dim,
        walk_std: 0.02,
        vocab_embeddings: emb,
        doc_length: 32,
        n_docs: 50,
        seed: 42,
        pattern_tokens: ((vocab_size - n_pattern) as u32..vocab_size as u32).collect(),
        pattern_rate: 0.3,
        hidden_noise_std: 0.01,
        ground_truth_words: 12,
    };
    let n_topics = 4;
    let (corpus, gt) = generate_corpus(&cfg, n_topics, cfg.n_docs)?;

    println!(
        "corpus: {} topics x {} docs x {} tokens = {} tokens total",
        n_topics,
        cfg.n_docs,
        cfg.doc_length,
        corpus.documents.len() * cfg.doc_length
    );

    for t in 0..n_topics {
        println!(
            "topic {t}: ground-truth words {:?}",
            &gt.top_words[t][..6.min(gt.top_words[t].len())]
        );
    }
    println!("pattern words: {:?}", gt.pattern_words);

    // Show one document per topic with its pattern positions highlighted.
    for t in 0..n_topics {
        let doc = corpus
            .documents
            .iter()
            .find(|d| d.topic_id == t)
            .expect("every topic has documents");
        let rendered: Vec<String> = doc.tokens[..12]
            .iter()
            .map(|&tok| cfg.vocab_embeddings.vocab[tok as usize].clone())
            .collect();
        let n_pat = doc
            .tokens
            .iter()
            .filter(|&&tok| (tok as usize) >= vocab_size - n_pattern)
            .count();
        println!(
            "doc {} (topic {t}): {} of {} tokens are patterns; starts: {}",
            doc.doc_id,
            n_pat,
            doc.tokens.len(),
            rendered.join(" ")
        );
    }

    // Trajectory drift over a document.
    let doc = &corpus.documents[0];
    let first = &doc.trajectory[0];
    let last = doc.trajectory.last().unwrap();
    let drift: f64 = first
        .iter()
        .zip(last)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    println!(
        "discourse drift over {} steps: |e_cN - e_c0| = {drift:.3} (step std {})",
        cfg.doc_length, cfg.walk_std
    );
    Ok(())
}
