//! Top-K sparse autoencoder: forward pass, reconstruction loss, Adam
//! optimizer, sparsity schedule, and the training loop.
//!
//! The model is a tied-weight two-layer map `x_hat = sigma(x W^T) W` where
//! `sigma` keeps the K largest pre-activations per token (ties broken toward
//! the lowest feature index) and clamps retained negatives to zero. There are
//! no bias terms and feature rows are never renormalized.
//!
//! Model container (little-endian): magic "SAEM", version u32 = 1,
//! n_features u64, dim u32, k u32, seed u64, steps_trained u64, then the
//! weight payload as f32 row-major.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, DenseMatrix};
use crate::store::{self, ByteReader, ShardStore};

pub const MODEL_MAGIC: [u8; 4] = *b"SAEM";
pub const MODEL_VERSION: u32 = 1;

/// A trained (or initializing) feature dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// C x D feature dictionary; row c is the direction of feature c.
    pub weights: DenseMatrix,
    /// Active features kept per token.
    pub k: usize,
    pub seed: u64,
    pub steps_trained: u64,
}

impl SaeModel {
    pub fn n_features(&self) -> usize {
        self.weights.rows
    }

    pub fn dim(&self) -> usize {
        self.weights.cols
    }

    pub fn feature(&self, c: usize) -> &[f64] {
        self.weights.row(c)
    }
}

/// One token's sparse feature activations: `(feature index, value)` pairs,
/// at most K of them, indices unique and ascending. Values are already
/// clamped at zero; a retained slot whose pre-activation was negative stays
/// in the list with value 0 and contributes nothing to decoding. The
/// *support* of a row is its positive entries.
pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseActivations {
    pub rows: Vec<SparseRow>,
}

impl SparseActivations {
    /// Indices with strictly positive value.
    pub fn support(row: &SparseRow) -> impl Iterator<Item = usize> + '_ {
        row.iter().filter(|(_, v)| *v > 0.0).map(|(c, _)| *c)
    }
}

/// Training hyperparameters. Defaults follow the reference recipe: Adam with
/// constant learning rate 1e-3, beta 0.9/0.999, epsilon 6.25e-10, 5 epochs,
/// and a sparsity anneal from 200 down to 20 over the first half of the
/// first epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub k_init: usize,
    pub k_final: usize,
    /// Fraction of the first epoch over which K anneals from k_init to k_final.
    pub k_anneal_fraction: f64,
    /// Fraction of rows held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 6.25e-10,
            epochs: 5,
            batch_size: 8192,
            k_init: 200,
            k_final: 20,
            k_anneal_fraction: 0.5,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidConfig("lr must be finite and >= 0".into()));
        }
        if self.k_final == 0 || self.k_final > self.k_init {
            return Err(Error::InvalidConfig("need 0 < k_final <= k_init".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(
                "val_fraction must be in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.k_anneal_fraction) {
            return Err(Error::InvalidConfig(
                "k_anneal_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Adam first/second moment estimates, same shape as the weights.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Per-epoch losses and summary statistics from a training run.
///
/// `val_losses[0]` is the validation loss of the freshly initialized model;
/// entry `e + 1` follows epoch `e`. Validation is always evaluated at
/// `k_final` so the numbers are comparable across the anneal.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Features that never activated (positive value) on the validation rows.
    pub dead_features: usize,
    pub final_k: usize,
    pub wall_time_secs: f64,
    pub config: TrainConfig,
    pub n_features: usize,
    pub dim: usize,
    pub train_rows: usize,
    pub val_rows: usize,
}

/// Kaiming-style initialization: i.i.d. normal entries with mean 0 and
/// standard deviation sqrt(2/D), drawn from a seeded generator.
pub fn init_model(n_features: usize, dim: usize, seed: u64) -> Result<SaeModel> {
    if n_features == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "n_features and dim must be >= 1".into(),
        ));
    }
    let std = (2.0 / dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n_features * dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    Ok(SaeModel {
        weights: DenseMatrix::from_vec(n_features, dim, data),
        k: n_features.min(20),
        seed,
        steps_trained: 0,
    })
}

/// Keep the K largest entries of `z` (ties: lowest index wins), zero the
/// rest, clamp retained negatives to 0. Output is index-sorted.
pub fn topk_activate(z: &[f64], k: usize) -> SparseRow {
    let k = k.min(z.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..z.len()).collect();
    if k < z.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx.into_iter().map(|c| (c, z[c].max(0.0))).collect()
}

fn preactivations(model: &SaeModel, x: &[f64]) -> Vec<f64> {
    (0..model.n_features())
        .map(|c| dot(x, model.feature(c)))
        .collect()
}

/// Encode one row at an explicit sparsity level.
pub fn encode_row(model: &SaeModel, x: &[f64], k: usize) -> Result<SparseRow> {
    if x.len() != model.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("row of dim {}", model.dim()),
            got: format!("{}", x.len()),
        });
    }
    Ok(topk_activate(&preactivations(model, x), k))
}

/// Encode a matrix of rows with the model's K.
pub fn encode(model: &SaeModel, xs: &DenseMatrix) -> Result<SparseActivations> {
    let mut rows = Vec::with_capacity(xs.rows);
    for i in 0..xs.rows {
        rows.push(encode_row(model, xs.row(i), model.k)?);
    }
    Ok(SparseActivations { rows })
}

/// Decode sparse activations back into the hidden space.
pub fn decode(acts: &SparseActivations, model: &SaeModel) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(acts.rows.len(), model.dim());
    for (i, row) in acts.rows.iter().enumerate() {
        let dst = out.row_mut(i);
        for &(c, a) in row {
            if c >= model.n_features() {
                return Err(Error::UnknownFeature {
                    id: c,
                    limit: model.n_features(),
                });
            }
            crate::math::axpy(a, model.feature(c), dst);
        }
    }
    Ok(out)
}

/// Mean over tokens of squared Euclidean row distance.
pub fn reconstruction_loss(x: &DenseMatrix, x_hat: &DenseMatrix) -> Result<f64> {
    if x.rows != x_hat.rows || x.cols != x_hat.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", x.rows, x.cols),
            got: format!("{}x{}", x_hat.rows, x_hat.cols),
        });
    }
    if x.rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..x.rows {
        total += crate::math::dist2(x.row(i), x_hat.row(i));
    }
    Ok(total / x.rows as f64)
}

/// Linear anneal of K: starts at `k_init`, reaches `k_final` after
/// `k_anneal_fraction * tokens_first_epoch` tokens, constant afterwards.
/// Intermediate values round to the nearest integer.
pub fn sparsity_schedule(
    tokens_seen: usize,
    tokens_first_epoch: usize,
    cfg: &TrainConfig,
) -> usize {
    let window = cfg.k_anneal_fraction * tokens_first_epoch as f64;
    if window <= 0.0 || tokens_seen as f64 >= window {
        return cfg.k_final;
    }
    let t = tokens_seen as f64 / window;
    let k = cfg.k_init as f64 + (cfg.k_final as f64 - cfg.k_init as f64) * t;
    k.round() as usize
}

// ---------------------------------------------------------------------------
// Loss and gradient with a fixed Top-K support
// ---------------------------------------------------------------------------

/// Reconstruction loss over `rows` of `xs` where token i may only use the
/// features in `supports[i]`. Activation values are recomputed as
/// `relu(x . w_c)`, matching the forward pass.
pub fn loss_with_fixed_support(
    weights: &DenseMatrix,
    xs: &DenseMatrix,
    rows: &[usize],
    supports: &[Vec<usize>],
) -> f64 {
    let mut total = 0.0;
    let mut x_hat = vec![0.0; xs.cols];
    for (bi, &ri) in rows.iter().enumerate() {
        let x = xs.row(ri);
        x_hat.fill(0.0);
        for &c in &supports[bi] {
            let a = dot(x, weights.row(c)).max(0.0);
            crate::math::axpy(a, weights.row(c), &mut x_hat);
        }
        total += crate::math::dist2(x, &x_hat);
    }
    total / rows.len().max(1) as f64
}

/// Analytic gradient of [`loss_with_fixed_support`] with respect to the
/// weights. The Top-K selection is held fixed; the gradient is exact for the
/// resulting piecewise-linear forward map (the ReLU clamp gates the encoder
/// path).
pub fn grad_with_fixed_support(
    weights: &DenseMatrix,
    xs: &DenseMatrix,
    rows: &[usize],
    supports: &[Vec<usize>],
) -> DenseMatrix {
    let mut grad = DenseMatrix::zeros(weights.rows, weights.cols);
    let scale = 2.0 / rows.len().max(1) as f64;
    let mut residual = vec![0.0; xs.cols];
    for (bi, &ri) in rows.iter().enumerate() {
        let x = xs.row(ri);
        residual.copy_from_slice(x);
        for v in residual.iter_mut() {
            *v = -*v;
        }
        // residual = x_hat - x
        let mut pre = Vec::with_capacity(supports[bi].len());
        for &c in &supports[bi] {
            let z = dot(x, weights.row(c));
            pre.push(z);
            crate::math::axpy(z.max(0.0), weights.row(c), &mut residual);
        }
        for (&c, &z) in supports[bi].iter().zip(&pre) {
            let g = grad.row_mut(c);
            // decoder path: d/dW_c of a * W_c contributes a * residual
            crate::math::axpy(scale * z.max(0.0), &residual, g);
            // encoder path: d a / d W_c = x when the clamp is open
            if z > 0.0 {
                let rw = dot(&residual, weights.row(c));
                crate::math::axpy(scale * rw, x, g);
            }
        }
    }
    grad
}

/// One Adam update over every coordinate, with bias correction.
pub fn adam_step(
    weights: &mut DenseMatrix,
    grad: &DenseMatrix,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for i in 0..weights.data.len() {
        let g = grad.data[i];
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * g;
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        weights.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

fn eval_loss(model: &SaeModel, xs: &DenseMatrix, rows: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    let mut x_hat = vec![0.0; xs.cols];
    for &ri in rows {
        let x = xs.row(ri);
        let acts = topk_activate(&preactivations(model, x), k);
        x_hat.fill(0.0);
        for &(c, a) in &acts {
            crate::math::axpy(a, model.feature(c), &mut x_hat);
        }
        total += crate::math::dist2(x, &x_hat);
    }
    total / rows.len().max(1) as f64
}

/// Train a Top-K autoencoder over every row of the store.
///
/// Deterministic for a fixed seed: batches, initialization, and gradient
/// accumulation all follow a fixed order. Aborts with
/// [`Error::NonFiniteLoss`] if the loss leaves the finite range.
pub fn train(
    store: &ShardStore,
    n_features: usize,
    cfg: &TrainConfig,
) -> Result<(SaeModel, TrainReport)> {
    cfg.validate()?;
    if n_features == 0 {
        return Err(Error::InvalidConfig("n_features must be >= 1".into()));
    }
    if cfg.k_final > n_features {
        return Err(Error::InvalidConfig(format!(
            "k_final {} exceeds feature count {n_features}",
            cfg.k_final
        )));
    }
    let started = Instant::now();
    let xs = store.to_matrix()?;
    if xs.rows == 0 {
        return Err(Error::InvalidConfig("store holds no rows".into()));
    }

    // Fixed validation split from the seed permutation's tail.
    let split = store::plan_batches(xs.rows, cfg.batch_size, cfg.seed)?;
    let val_count = ((xs.rows as f64) * cfg.val_fraction).floor() as usize;
    let val_count = val_count.min(xs.rows.saturating_sub(1));
    let train_rows: Vec<usize> = split.order[..xs.rows - val_count].to_vec();
    let val_rows: Vec<usize> = split.order[xs.rows - val_count..].to_vec();
    let eval_rows: &[usize] = if val_rows.is_empty() {
        &train_rows
    } else {
        &val_rows
    };

    let mut model = init_model(n_features, xs.cols, cfg.seed)?;
    let mut adam = AdamState::new(n_features * xs.cols);

    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut val_losses = Vec::with_capacity(cfg.epochs + 1);
    val_losses.push(eval_loss(&model, &xs, eval_rows, cfg.k_final));

    let tokens_first_epoch = train_rows.len();
    let mut tokens_seen = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = train_rows.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::math::mix_seed(cfg.seed, 0x5A31, epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_sq_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let k = sparsity_schedule(tokens_seen, tokens_first_epoch, cfg).min(n_features);
            let supports: Vec<Vec<usize>> = batch
                .iter()
                .map(|&ri| {
                    topk_activate(&preactivations(&model, xs.row(ri)), k)
                        .into_iter()
                        .map(|(c, _)| c)
                        .collect()
                })
                .collect();
            let loss = loss_with_fixed_support(&model.weights, &xs, batch, &supports);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grad = grad_with_fixed_support(&model.weights, &xs, batch, &supports);
            adam_step(&mut model.weights, &grad, &mut adam, cfg);
            epoch_sq_sum += loss * batch.len() as f64;
            tokens_seen += batch.len();
            step += 1;
        }
        train_losses.push(epoch_sq_sum / tokens_first_epoch.max(1) as f64);
        let vl = eval_loss(&model, &xs, eval_rows, cfg.k_final);
        if !vl.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        val_losses.push(vl);
    }

    // Dead features: never positively activated on the validation rows.
    let mut alive = vec![false; n_features];
    for &ri in eval_rows {
        for (c, v) in topk_activate(&preactivations(&model, xs.row(ri)), cfg.k_final) {
            if v > 0.0 {
                alive[c] = true;
            }
        }
    }
    let dead_features = alive.iter().filter(|a| !**a).count();

    model.k = cfg.k_final;
    model.steps_trained = step as u64;
    let report = TrainReport {
        train_losses,
        val_losses,
        dead_features,
        final_k: cfg.k_final,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
        n_features,
        dim: xs.cols,
        train_rows: train_rows.len(),
        val_rows: val_rows.len(),
    };
    Ok((model, report))
}

/// Suggested feature count for a token budget: `Z^gamma` rounded to the
/// nearest power of two.
pub fn recommend_feature_count(train_tokens: u64, gamma: f64) -> Result<u64> {
    if train_tokens == 0 {
        return Err(Error::InvalidConfig("train_tokens must be >= 1".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidConfig("gamma must lie in (0, 1)".into()));
    }
    let raw = (train_tokens as f64).powf(gamma);
    if raw <= 1.0 {
        return Ok(1);
    }
    let lo_exp = raw.log2().floor() as u32;
    let lo = 2f64.powi(lo_exp as i32);
    let hi = lo * 2.0;
    let pick = if raw - lo <= hi - raw { lo } else { hi };
    Ok(pick as u64)
}

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

/// Write the model to the "SAEM" container (weights quantized to f32).
pub fn save_model(model: &SaeModel, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + model.weights.data.len() * 4);
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.n_features() as u64).to_le_bytes());
    buf.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.k as u32).to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&model.steps_trained.to_le_bytes());
    for v in &model.weights.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SaeModel> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&buf);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let c = r.u64()?;
    let d = r.u32()?;
    let k = r.u32()?;
    let seed = r.u64()?;
    let steps = r.u64()?;
    store::check_body_size(&r, c, d as usize * 4)?;
    let data: Vec<f64> = r
        .f32_vec(c as usize * d as usize)?
        .into_iter()
        .map(|v| v as f64)
        .collect();
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / d.max(1) as usize,
                col: i % d.max(1) as usize,
            });
        }
    }
    Ok(SaeModel {
        weights: DenseMatrix::from_vec(c as usize, d as usize, data),
        k: k as usize,
        seed,
        steps_trained: steps,
    })
}
