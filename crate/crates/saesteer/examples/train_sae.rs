//! Train a Top-K sparse autoencoder on a recoverable synthetic problem and
//! watch the validation loss collapse.
//!
//! The data are nonnegative 4-sparse combinations of 64 orthonormal atoms,
//! so a correctly trained tied-weight dictionary can drive the
//! reconstruction loss to (nearly) zero.
//!
//! Usage:
//!   cargo run --release --example train_sae

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use saesteer::math::dot;
use saesteer::sae::{train, TrainConfig};
use saesteer::store::{ActivationShard, ShardStore};

fn orthonormal_atoms(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let proj = dot(&v, r);
            for (vi, ri) in v.iter_mut().zip(r) {
                *vi -= proj * ri;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            for vi in &mut v {
                *vi /= norm;
            }
            rows.push(v);
        }
    }
    rows
}

fn main() -> saesteer::Result<()> {
    let dim = 64;
    let n_tokens = 50_000;
    let sparsity = 4;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let atoms = orthonormal_atoms(64, dim, &mut rng);
    let mut data = vec![0.0f32; n_tokens * dim];
    for i in 0..n_tokens {
        for _ in 0..sparsity {
            let a = rng.random_range(0..atoms.len());
            let coef: f64 = rng.random_range(0.5..2.0);
            for j in 0..dim {
                data[i * dim + j] += (coef * atoms[a][j]) as f32;
            }
        }
    }
    let store = ShardStore::new(vec![ActivationShard {
        dim,
        data,
        token_ids: (0..n_tokens as u32).collect(),
        doc_ids: vec![0; n_tokens],
        layer_tag: "synthetic".into(),
    }]);

    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 5,
        batch_size: 64,
        k_init: 16,
        k_final: sparsity,
        seed: 11,
        ..TrainConfig::default()
    };
    println!(
        "training {} features on {n_tokens} tokens (K {} -> {})",
        atoms.len(),
        cfg.k_init,
        cfg.k_final
    );
    let (model, report) = train(&store, atoms.len(), &cfg)?;

    println!("epoch  train_loss   val_loss");
    println!("  pre           -   {:.6}", report.val_losses[0]);
    for (e, (tl, vl)) in report
        .train_losses
        .iter()
        .zip(&report.val_losses[1..])
        .enumerate()
    {
        println!("{e:>5}  {tl:>10.6}  {vl:>9.6}");
    }
    println!(
        "final/initial validation MSE: {:.5}; dead features: {}; wall time {:.1}s",
        report.val_losses.last().unwrap() / report.val_losses[0],
        report.dead_features,
        report.wall_time_secs
    );

    // How close did the learned rows get to the generating atoms?
    let mut well_matched = 0;
    for atom in &atoms {
        let best = (0..model.n_features())
            .map(|c| {
                let w = model.feature(c);
                (dot(w, atom) / dot(w, w).sqrt()).abs()
            })
            .fold(0.0f64, f64::max);
        if best > 0.95 {
            well_matched += 1;
        }
    }
    println!(
        "{well_matched}/{} generating atoms have a feature with |cosine| > 0.95",
        atoms.len()
    );
    Ok(())
}
