//! Runtime steering of activation streams with a labeled feature subset.
//!
//! Two transforms over the hidden rows, both gated by ReLU projections onto
//! the selected feature rows `S` (an `s x D` slice of the model dictionary):
//!
//! - amplify:   `X' = X + alpha * relu(X S^T) S`
//! - calibrate: `X' = X - relu(X S^T) S + beta * S_mean` (row-wise shift
//!   toward the subset's mean vector)
//!
//! `alpha = -1` erases the subset's activations; `beta` defaults to 2.5.
//! Modes may be chained in order.
//!
//! Label file: JSON Lines of `{"feature_id":int,"label":str}`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, dot, DenseMatrix};
use crate::sae::SaeModel;
use crate::store::{self, ActivationShard};

/// Default calibration level.
pub const DEFAULT_BETA: f64 = 2.5;
/// Amplification factor that erases the subset's activations.
pub const ERASE_ALPHA: f64 = -1.0;

/// An external feature annotation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureLabel {
    pub feature_id: usize,
    pub label: String,
}

/// Selected feature rows, copied bitwise from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSubset {
    /// s x D matrix of selected rows.
    pub rows: DenseMatrix,
    pub feature_ids: Vec<usize>,
    pub label: String,
}

impl FeatureSubset {
    pub fn len(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_ids.is_empty()
    }

    /// Column mean of the subset rows.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.rows.cols];
        for i in 0..self.rows.rows {
            axpy(1.0, self.rows.row(i), &mut mean);
        }
        let inv = 1.0 / self.rows.rows as f64;
        for v in &mut mean {
            *v *= inv;
        }
        mean
    }
}

/// How to transform the stream.
#[derive(Debug, Clone, PartialEq)]
pub enum SteerMode {
    Amplify { alpha: f64 },
    Calibrate { beta: f64 },
    Composite(Vec<SteerMode>),
}

impl SteerMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            SteerMode::Composite(steps) if steps.is_empty() => Err(Error::InvalidConfig(
                "composite steering needs at least one step".into(),
            )),
            SteerMode::Composite(steps) => {
                for s in steps {
                    s.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Parse `"amplify:-1,calibrate:2.5"` into an ordered mode list.
pub fn parse_steps(spec: &str) -> Result<SteerMode> {
    let mut steps = Vec::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, value) = part
            .split_once(':')
            .ok_or_else(|| Error::Malformed(format!("steering step {part:?} is not name:value")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Malformed(format!("bad steering value in {part:?}")))?;
        match name.trim() {
            "amplify" => steps.push(SteerMode::Amplify { alpha: value }),
            "calibrate" => steps.push(SteerMode::Calibrate { beta: value }),
            other => {
                return Err(Error::Malformed(format!(
                    "unknown steering step {other:?} (amplify|calibrate)"
                )))
            }
        }
    }
    let mode = SteerMode::Composite(steps);
    mode.validate()?;
    Ok(mode)
}

pub fn read_labels(path: &Path) -> Result<Vec<FeatureLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

pub fn write_labels(labels: &[FeatureLabel], path: &Path) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Pick the model rows whose label matches `query`, ordered by feature id.
pub fn select_features(
    labels: &[FeatureLabel],
    query: &str,
    model: &SaeModel,
) -> Result<FeatureSubset> {
    let mut ids: Vec<usize> = Vec::new();
    for l in labels {
        if l.feature_id >= model.n_features() {
            return Err(Error::UnknownFeature {
                id: l.feature_id,
                limit: model.n_features(),
            });
        }
        if l.label == query {
            ids.push(l.feature_id);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::EmptySelection {
            label: query.to_owned(),
        });
    }
    let mut data = Vec::with_capacity(ids.len() * model.dim());
    for &c in &ids {
        data.extend_from_slice(model.feature(c));
    }
    Ok(FeatureSubset {
        rows: DenseMatrix::from_vec(ids.len(), model.dim(), data),
        feature_ids: ids,
        label: query.to_owned(),
    })
}

fn check_width(x: &DenseMatrix, subset: &FeatureSubset) -> Result<()> {
    if x.cols != subset.rows.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{} columns", subset.rows.cols),
            got: format!("{}", x.cols),
        });
    }
    Ok(())
}

/// `X' = X + alpha * relu(X S^T) S`.
pub fn amplify(x: &DenseMatrix, subset: &FeatureSubset, alpha: f64) -> Result<DenseMatrix> {
    check_width(x, subset)?;
    let mut out = x.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    let s = &subset.rows;
    out.data.par_chunks_mut(x.cols).for_each(|row| {
        for i in 0..s.rows {
            let gate = dot(row, s.row(i)).max(0.0);
            if gate > 0.0 {
                axpy(alpha * gate, s.row(i), row);
            }
        }
    });
    Ok(out)
}

/// `X' = X - relu(X S^T) S + beta * S_mean` applied to every row.
pub fn calibrate(x: &DenseMatrix, subset: &FeatureSubset, beta: f64) -> Result<DenseMatrix> {
    check_width(x, subset)?;
    let mut out = x.clone();
    let s = &subset.rows;
    let mean = subset.mean_vector();
    out.data.par_chunks_mut(x.cols).for_each(|row| {
        let gates: Vec<f64> = (0..s.rows).map(|i| dot(row, s.row(i)).max(0.0)).collect();
        for (i, &g) in gates.iter().enumerate() {
            if g > 0.0 {
                axpy(-g, s.row(i), row);
            }
        }
        axpy(beta, &mean, row);
    });
    Ok(out)
}

/// Apply a mode (composites run in order).
pub fn apply_mode(
    x: &DenseMatrix,
    subset: &FeatureSubset,
    mode: &SteerMode,
) -> Result<DenseMatrix> {
    mode.validate()?;
    match mode {
        SteerMode::Amplify { alpha } => amplify(x, subset, *alpha),
        SteerMode::Calibrate { beta } => calibrate(x, subset, *beta),
        SteerMode::Composite(steps) => {
            let mut current = x.clone();
            for step in steps {
                current = apply_mode(&current, subset, step)?;
            }
            Ok(current)
        }
    }
}

/// Transform every shard in a manifest, preserving token/document metadata,
/// and write the results plus a fresh manifest into `out_dir`.
pub fn steer_stream(
    manifest_in: &Path,
    subset: &FeatureSubset,
    mode: &SteerMode,
    out_dir: &Path,
) -> Result<()> {
    mode.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = store::read_manifest(manifest_in)?;
    let mut names = Vec::with_capacity(paths.len());
    for p in &paths {
        let shard = store::read_shard(p)?;
        if shard.dim != subset.rows.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("shard dim {}", subset.rows.cols),
                got: format!("{}", shard.dim),
            });
        }
        let x = DenseMatrix::from_vec(
            shard.n_rows(),
            shard.dim,
            shard.data.iter().map(|&v| v as f64).collect(),
        );
        let steered = apply_mode(&x, subset, mode)?;
        let out_shard = ActivationShard {
            dim: shard.dim,
            data: steered.data.iter().map(|&v| v as f32).collect(),
            token_ids: shard.token_ids,
            doc_ids: shard.doc_ids,
            layer_tag: shard.layer_tag,
        };
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "shard.saes".to_owned());
        store::write_shard(&out_shard, &out_dir.join(&name))?;
        names.push(name);
    }
    store::write_manifest(&names, &out_dir.join("manifest.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::init_model;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subset_from(rows: DenseMatrix) -> FeatureSubset {
        FeatureSubset {
            feature_ids: (0..rows.rows).collect(),
            rows,
            label: "test".into(),
        }
    }

    /// Gram-Schmidt orthonormalization of random rows.
    fn orthonormal_rows(s: usize, d: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < s {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for r in &rows {
                let proj = dot(&v, r);
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= proj * ri;
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                for vi in &mut v {
                    *vi /= norm;
                }
                rows.push(v);
            }
        }
        DenseMatrix::from_vec(s, d, rows.into_iter().flatten().collect())
    }

    #[test]
    fn select_by_label() {
        let model = init_model(10, 4, 1).unwrap();
        let labels = vec![
            FeatureLabel {
                feature_id: 7,
                label: "safety".into(),
            },
            FeatureLabel {
                feature_id: 3,
                label: "safety".into(),
            },
            FeatureLabel {
                feature_id: 5,
                label: "harmful".into(),
            },
        ];
        let s = select_features(&labels, "safety", &model).unwrap();
        assert_eq!(s.feature_ids, vec![3, 7]);
        assert_eq!(s.rows.row(0), model.feature(3));
        assert_eq!(s.rows.row(1), model.feature(7));

        assert!(matches!(
            select_features(&labels, "nope", &model),
            Err(Error::EmptySelection { .. })
        ));
        let bad = vec![FeatureLabel {
            feature_id: 10,
            label: "x".into(),
        }];
        assert!(matches!(
            select_features(&bad, "x", &model),
            Err(Error::UnknownFeature { id: 10, .. })
        ));
    }

    #[test]
    fn amplify_zero_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DenseMatrix::from_vec(
            20,
            8,
            (0..160).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let s = subset_from(orthonormal_rows(3, 8, 5));
        let out = amplify(&x, &s, 0.0).unwrap();
        assert!(x
            .data
            .iter()
            .zip(&out.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn amplify_hand_example() {
        let x = DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]);
        let s = subset_from(DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]));
        let out = amplify(&x, &s, 1.0).unwrap();
        assert_eq!(out.data, vec![2.0, 0.0]);
    }

    #[test]
    fn erasure_zeroes_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = subset_from(orthonormal_rows(4, 16, 7));
        let x = DenseMatrix::from_vec(
            200,
            16,
            (0..3200).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let out = amplify(&x, &s, ERASE_ALPHA).unwrap();
        for i in 0..out.rows {
            for j in 0..s.rows.rows {
                let gate = dot(out.row(i), s.rows.row(j)).max(0.0);
                assert!(gate < 1e-6, "row {i} feature {j}: residual gate {gate}");
            }
        }
    }

    #[test]
    fn orthogonal_component_is_preserved() {
        // S spans the first two coordinates; the rest of X must survive.
        let s = subset_from(DenseMatrix::from_vec(
            2,
            4,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseMatrix::from_vec(
            50,
            4,
            (0..200).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let out = amplify(&x, &s, 2.5).unwrap();
        for i in 0..x.rows {
            assert!((x.row(i)[2] - out.row(i)[2]).abs() < 1e-7);
            assert!((x.row(i)[3] - out.row(i)[3]).abs() < 1e-7);
        }
    }

    #[test]
    fn positive_gate_composition_scales_projections() {
        let s = subset_from(orthonormal_rows(2, 6, 9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // rows with strictly positive projections on both subset directions
        let mut data = Vec::new();
        for _ in 0..20 {
            let mut row = vec![0.0; 6];
            for j in 0..2 {
                axpy(rng.random_range(0.5..2.0), s.rows.row(j), &mut row);
            }
            data.extend_from_slice(&row);
        }
        let x = DenseMatrix::from_vec(20, 6, data);
        let (a1, a2) = (0.5, 0.25);
        let once = amplify(&x, &s, a1).unwrap();
        let twice = amplify(&once, &s, a2).unwrap();
        for i in 0..x.rows {
            for j in 0..2 {
                let before = dot(x.row(i), s.rows.row(j));
                let after = dot(twice.row(i), s.rows.row(j));
                let expect = before * (1.0 + a1) * (1.0 + a2);
                assert!((after - expect).abs() < 1e-6 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn calibrate_shift_and_linearity() {
        // Rows orthogonal to every subset row: only the beta shift applies.
        let s = subset_from(DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]));
        assert_eq!(s.mean_vector(), vec![1.0, 0.0]);
        let x = DenseMatrix::from_vec(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.5]);
        let out = calibrate(&x, &s, 2.0).unwrap();
        for i in 0..3 {
            assert!((out.row(i)[0] - 2.0).abs() < 1e-12);
            assert_eq!(out.row(i)[1], x.row(i)[1]);
        }

        // beta = 0 with nothing activating leaves X unchanged
        let idle = calibrate(&x, &s, 0.0).unwrap();
        for (a, b) in x.data.iter().zip(&idle.data) {
            assert!((a - b).abs() < 1e-15);
        }

        // difference of two calibrations is exactly (b1 - b2) * mean
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xr = DenseMatrix::from_vec(
            40,
            2,
            (0..80).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let (b1, b2) = (2.5, -1.25);
        let c1 = calibrate(&xr, &s, b1).unwrap();
        let c2 = calibrate(&xr, &s, b2).unwrap();
        let mean = s.mean_vector();
        for i in 0..xr.rows {
            for j in 0..2 {
                let diff = c1.row(i)[j] - c2.row(i)[j];
                assert!((diff - (b1 - b2) * mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_is_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = subset_from(orthonormal_rows(2, 5, 13));
        let x = DenseMatrix::from_vec(
            10,
            5,
            (0..50).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mode = SteerMode::Composite(vec![
            SteerMode::Amplify { alpha: -1.0 },
            SteerMode::Calibrate { beta: 0.7 },
        ]);
        let got = apply_mode(&x, &s, &mode).unwrap();
        let manual = calibrate(&amplify(&x, &s, -1.0).unwrap(), &s, 0.7).unwrap();
        assert_eq!(got.data, manual.data);

        assert!(SteerMode::Composite(vec![]).validate().is_err());
    }

    #[test]
    fn parse_steps_roundtrip() {
        let mode = parse_steps("amplify:-1, calibrate:2.5").unwrap();
        assert_eq!(
            mode,
            SteerMode::Composite(vec![
                SteerMode::Amplify { alpha: -1.0 },
                SteerMode::Calibrate { beta: 2.5 },
            ])
        );
        assert!(parse_steps("boost:2").is_err());
        assert!(parse_steps("").is_err());
    }

    #[test]
    fn steer_stream_matches_in_memory_and_preserves_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let shard = ActivationShard {
            dim: 4,
            data: (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            token_ids: vec![42],
            doc_ids: vec![7],
            layer_tag: "L".into(),
        };
        store::write_shard(&shard, &dir.path().join("a.saes")).unwrap();
        let manifest = dir.path().join("manifest.txt");
        store::write_manifest(&["a.saes".into()], &manifest).unwrap();

        let s = subset_from(orthonormal_rows(2, 4, 15));
        let out_dir = dir.path().join("out");

        // alpha = 0 keeps the payload identical
        steer_stream(&manifest, &s, &SteerMode::Amplify { alpha: 0.0 }, &out_dir).unwrap();
        let same = store::read_shard(&out_dir.join("a.saes")).unwrap();
        assert_eq!(same.data, shard.data);
        assert_eq!(same.token_ids, shard.token_ids);
        assert_eq!(same.doc_ids, shard.doc_ids);
        assert_eq!(same.layer_tag, shard.layer_tag);

        // single row path equivalence against the in-memory transform
        let mode = SteerMode::Amplify { alpha: 1.5 };
        steer_stream(&manifest, &s, &mode, &out_dir).unwrap();
        let streamed = store::read_shard(&out_dir.join("a.saes")).unwrap();
        let x = DenseMatrix::from_vec(1, 4, shard.data.iter().map(|&v| v as f64).collect());
        let direct = apply_mode(&x, &s, &mode).unwrap();
        for (a, b) in streamed.data.iter().zip(&direct.data) {
            assert_eq!(*a, *b as f32);
        }
    }
}
