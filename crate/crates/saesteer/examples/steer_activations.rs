//! Steer an activation matrix with a labeled feature subset: amplify,
//! erase (alpha = -1), calibrate, and a composite of both.
//!
//! Usage:
//!   cargo run --release --example steer_activations

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saesteer::math::{dot, DenseMatrix};
use saesteer::sae::init_model;
use saesteer::steer::{
    amplify, apply_mode, calibrate, select_features, FeatureLabel, SteerMode, DEFAULT_BETA,
    ERASE_ALPHA,
};

fn mean_gate(x: &DenseMatrix, s: &saesteer::steer::FeatureSubset) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows {
        for j in 0..s.rows.rows {
            total += dot(x.row(i), s.rows.row(j)).max(0.0);
        }
    }
    total / (x.rows * s.rows.rows) as f64
}

fn main() -> saesteer::Result<()> {
    let dim = 32;
    let model = init_model(64, dim, 3)?;

    // Externally supplied labels mark which features carry the behavior.
    let labels = vec![
        FeatureLabel {
            feature_id: 5,
            label: "safety".into(),
        },
        FeatureLabel {
            feature_id: 12,
            label: "safety".into(),
        },
        FeatureLabel {
            feature_id: 40,
            label: "safety".into(),
        },
        FeatureLabel {
            feature_id: 9,
            label: "harmful".into(),
        },
    ];
    let safety = select_features(&labels, "safety", &model)?;
    println!(
        "selected {} rows labeled {:?}: features {:?}",
        safety.len(),
        safety.label,
        safety.feature_ids
    );

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = DenseMatrix::from_vec(
        1000,
        dim,
        (0..1000 * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );

    println!(
        "mean ReLU gate before:            {:.4}",
        mean_gate(&x, &safety)
    );
    let boosted = amplify(&x, &safety, 2.0)?;
    println!(
        "after amplify(alpha = 2):         {:.4}",
        mean_gate(&boosted, &safety)
    );

    // Subset rows from a trained model are not mutually orthogonal, so
    // erasure is approximate here; with orthonormal rows it is exact.
    let erased = amplify(&x, &safety, ERASE_ALPHA)?;
    println!(
        "after amplify(alpha = -1), erase: {:.4e}",
        mean_gate(&erased, &safety)
    );

    let calibrated = calibrate(&x, &safety, DEFAULT_BETA)?;
    println!(
        "after calibrate(beta = {DEFAULT_BETA}):       {:.4}",
        mean_gate(&calibrated, &safety)
    );

    // Erase harmful features, then hold the safety level: two steps in order.
    let harmful = select_features(&labels, "harmful", &model)?;
    let step1 = apply_mode(&x, &harmful, &SteerMode::Amplify { alpha: ERASE_ALPHA })?;
    let both = apply_mode(
        &step1,
        &safety,
        &SteerMode::Calibrate { beta: DEFAULT_BETA },
    )?;
    println!(
        "composite erase-harmful + calibrate-safety: harmful gate {:.4e}, safety gate {:.4}",
        mean_gate(&both, &harmful),
        mean_gate(&both, &safety)
    );

    // Components orthogonal to span(S) are untouched: the correction the
    // transform adds always lies inside span(S). Project both matrices onto
    // the orthogonal complement with an orthonormalized basis and compare.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..safety.rows.rows {
        let mut v: Vec<f64> = safety.rows.row(j).to_vec();
        for b in &basis {
            let p = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    let complement = |row: &[f64]| -> Vec<f64> {
        let mut r = row.to_vec();
        for b in &basis {
            let p = dot(&r, b);
            for (ri, bi) in r.iter_mut().zip(b) {
                *ri -= p * bi;
            }
        }
        r
    };
    let mut delta_orth = 0.0f64;
    for i in 0..x.rows {
        for (a, b) in complement(x.row(i)).iter().zip(complement(erased.row(i))) {
            delta_orth = delta_orth.max((a - b).abs());
        }
    }
    println!("max change outside span(S) after erasure: {delta_orth:.2e}");
    Ok(())
}
