//! Binary ingestion and persistence for activation matrices, output-embedding
//! matrices, and vocabularies, plus deterministic batch planning.
//!
//! Shard container (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "SAES"
//! version    u32      1
//! dtype      u8       0 (f32)
//! n_rows     u64
//! dim        u32
//! tag_len    u16      followed by tag_len bytes of UTF-8 layer tag
//! payload    n_rows * dim * f32, row-major
//! token_ids  n_rows * u32
//! doc_ids    n_rows * u32
//! ```
//!
//! An embedding matrix uses the same container with `n_rows = vocab_size`
//! and no id sections. A vocabulary is a text file with one UTF-8 token per
//! line; a manifest is a text file with one shard path per line, resolved
//! relative to the manifest's directory.
//!
//! Shards are immutable after write: concurrent readers are safe, and a
//! loaded shard may be sent across threads freely.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SHARD_MAGIC: [u8; 4] = *b"SAES";
pub const CONTAINER_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A block of token hidden states with per-row token and document identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    /// Hidden dimension D.
    pub dim: usize,
    /// Row-major N x D payload.
    pub data: Vec<f32>,
    /// Vocabulary id of each row's token.
    pub token_ids: Vec<u32>,
    /// Document id of each row's token.
    pub doc_ids: Vec<u32>,
    /// Free-form provenance tag (e.g. which layer the dump came from).
    pub layer_tag: String,
}

impl ActivationShard {
    pub fn n_rows(&self) -> usize {
        self.token_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Check the structural invariants: consistent lengths, finite values.
    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if self.doc_ids.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} doc ids"),
                got: format!("{}", self.doc_ids.len()),
            });
        }
        if self.data.len() != n * self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} payload values", n * self.dim),
                got: format!("{}", self.data.len()),
            });
        }
        check_finite(&self.data, self.dim.max(1))?;
        Ok(())
    }
}

/// Output-embedding matrix together with its ordered vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// Embedding dimension D.
    pub dim: usize,
    /// Row-major |V| x D payload; row w is the output embedding of word w.
    pub data: Vec<f32>,
    /// Token strings, one per row, unique.
    pub vocab: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn row(&self, w: usize) -> &[f32] {
        &self.data[w * self.dim..(w + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.vocab.len() * self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} payload values", self.vocab.len() * self.dim),
                got: format!("{}", self.data.len()),
            });
        }
        check_finite(&self.data, self.dim.max(1))?;
        let mut seen = std::collections::HashSet::new();
        for t in &self.vocab {
            if !seen.insert(t.as_str()) {
                return Err(Error::DuplicateToken { token: t.clone() });
            }
        }
        Ok(())
    }
}

/// Deterministic shuffled iteration order over a row range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    /// Permutation of 0..total_rows.
    pub order: Vec<usize>,
}

impl BatchPlan {
    /// Batches in plan order; the final batch may be shorter.
    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }
}

/// Shuffle `0..total_rows` with a seeded generator.
///
/// Same `(total_rows, batch_size, seed)` always yields the same plan; zero
/// rows yield an empty plan.
pub fn plan_batches(total_rows: usize, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..total_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(BatchPlan {
        batch_size,
        seed,
        order,
    })
}

// ---------------------------------------------------------------------------
// Container encoding
// ---------------------------------------------------------------------------

fn check_finite(data: &[f32], dim: usize) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / dim,
                col: i % dim,
            });
        }
    }
    Ok(())
}

fn encode_header(buf: &mut Vec<u8>, n_rows: u64, dim: u32, tag: &str) -> Result<()> {
    if tag.len() > u16::MAX as usize {
        return Err(Error::InvalidConfig(
            "layer tag longer than 65535 bytes".into(),
        ));
    }
    buf.extend_from_slice(&SHARD_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&n_rows.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&(tag.len() as u16).to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    Ok(())
}

/// Cursor over a byte buffer that reports truncation with byte counts.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedPayload {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn u32_vec(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse the shared container header; returns (n_rows, dim, layer_tag).
pub(crate) fn decode_header(r: &mut ByteReader) -> Result<(u64, u32, String)> {
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != SHARD_MAGIC {
        return Err(Error::BadMagic {
            expected: SHARD_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CONTAINER_VERSION,
        });
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let n_rows = r.u64()?;
    let dim = r.u32()?;
    let tag_len = r.u16()? as usize;
    let tag = std::str::from_utf8(r.take(tag_len)?)
        .map_err(|e| Error::Malformed(format!("layer tag is not UTF-8: {e}")))?
        .to_owned();
    Ok((n_rows, dim, tag))
}

/// Check that the body after the header holds exactly `n_rows` row units of
/// `row_unit` bytes, distinguishing whole-row mismatches from torn bytes.
pub(crate) fn check_body_size(r: &ByteReader, n_rows: u64, row_unit: usize) -> Result<()> {
    let expected = (n_rows as usize) * row_unit;
    let found = r.remaining();
    if found == expected {
        return Ok(());
    }
    if row_unit > 0 && found % row_unit == 0 {
        return Err(Error::DimensionMismatch {
            declared: n_rows,
            actual: (found / row_unit) as u64,
        });
    }
    Err(Error::TruncatedPayload {
        expected: expected + (r.buf.len() - r.remaining()),
        found: r.buf.len(),
    })
}

/// Serialize a shard to `path`. Non-finite values are rejected.
pub fn write_shard(shard: &ActivationShard, path: &Path) -> Result<()> {
    shard.validate()?;
    let n = shard.n_rows();
    let mut buf = Vec::with_capacity(23 + shard.layer_tag.len() + n * (shard.dim * 4 + 8));
    encode_header(&mut buf, n as u64, shard.dim as u32, &shard.layer_tag)?;
    for v in &shard.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for id in &shard.token_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for id in &shard.doc_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a shard written by [`write_shard`]. The roundtrip is bit-exact.
pub fn read_shard(path: &Path) -> Result<ActivationShard> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&buf);
    let (n_rows, dim, layer_tag) = decode_header(&mut r)?;
    check_body_size(&r, n_rows, dim as usize * 4 + 8)?;
    let n = n_rows as usize;
    let data = r.f32_vec(n * dim as usize)?;
    check_finite(&data, dim.max(1) as usize)?;
    let token_ids = r.u32_vec(n)?;
    let doc_ids = r.u32_vec(n)?;
    Ok(ActivationShard {
        dim: dim as usize,
        data,
        token_ids,
        doc_ids,
        layer_tag,
    })
}

/// Write a bare f32 matrix in the shard container (no id sections). Used
/// for embedding matrices and score-table audit dumps.
pub fn write_f32_matrix(
    rows: usize,
    cols: usize,
    data: &[f32],
    tag: &str,
    path: &Path,
) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{} payload values", rows * cols),
            got: format!("{}", data.len()),
        });
    }
    check_finite(data, cols.max(1))?;
    let mut buf = Vec::with_capacity(23 + tag.len() + data.len() * 4);
    encode_header(&mut buf, rows as u64, cols as u32, tag)?;
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serialize an embedding matrix (container without id sections).
pub fn write_embedding_matrix(emb: &EmbeddingMatrix, path: &Path) -> Result<()> {
    emb.validate()?;
    write_f32_matrix(emb.vocab.len(), emb.dim, &emb.data, "", path)
}

/// Write the vocabulary, one token per line.
pub fn write_vocab(vocab: &[String], path: &Path) -> Result<()> {
    for t in vocab {
        if t.contains('\n') || t.contains('\r') {
            return Err(Error::InvalidConfig(format!(
                "vocabulary token {t:?} contains a line break"
            )));
        }
    }
    let mut out = String::new();
    for t in vocab {
        out.push_str(t);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load an embedding matrix plus its vocabulary file.
///
/// The matrix row count must equal the vocabulary line count and tokens must
/// be unique.
pub fn load_embeddings(matrix_path: &Path, vocab_path: &Path) -> Result<EmbeddingMatrix> {
    let buf = fs::read(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
    let mut r = ByteReader::new(&buf);
    let (n_rows, dim, _tag) = decode_header(&mut r)?;
    check_body_size(&r, n_rows, dim as usize * 4)?;
    let data = r.f32_vec(n_rows as usize * dim as usize)?;
    check_finite(&data, dim.max(1) as usize)?;

    let text = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
    let vocab: Vec<String> = text.lines().map(|l| l.to_owned()).collect();
    if vocab.len() != n_rows as usize {
        return Err(Error::CountMismatch {
            matrix_rows: n_rows as usize,
            vocab_lines: vocab.len(),
        });
    }
    let emb = EmbeddingMatrix {
        dim: dim as usize,
        data,
        vocab,
    };
    emb.validate()?;
    Ok(emb)
}

// ---------------------------------------------------------------------------
// Shard stores and manifests
// ---------------------------------------------------------------------------

/// An eagerly loaded collection of shards from a manifest.
#[derive(Debug, Clone)]
pub struct ShardStore {
    pub shards: Vec<ActivationShard>,
}

impl ShardStore {
    pub fn new(shards: Vec<ActivationShard>) -> Self {
        ShardStore { shards }
    }

    pub fn total_rows(&self) -> usize {
        self.shards.iter().map(|s| s.n_rows()).sum()
    }

    /// Dimension shared by every shard; error when shards disagree.
    pub fn dim(&self) -> Result<usize> {
        let mut dims = self.shards.iter().map(|s| s.dim);
        let Some(first) = dims.next() else {
            return Err(Error::InvalidConfig("store holds no shards".into()));
        };
        for d in dims {
            if d != first {
                return Err(Error::ShapeMismatch {
                    expected: format!("dim {first}"),
                    got: format!("dim {d}"),
                });
            }
        }
        Ok(first)
    }

    /// Map a global row index to (shard index, row-in-shard).
    pub fn locate(&self, mut row: usize) -> (usize, usize) {
        for (i, s) in self.shards.iter().enumerate() {
            if row < s.n_rows() {
                return (i, row);
            }
            row -= s.n_rows();
        }
        panic!("row index out of range");
    }

    pub fn row(&self, global: usize) -> &[f32] {
        let (s, r) = self.locate(global);
        self.shards[s].row(r)
    }

    pub fn token_id(&self, global: usize) -> u32 {
        let (s, r) = self.locate(global);
        self.shards[s].token_ids[r]
    }

    pub fn doc_id(&self, global: usize) -> u32 {
        let (s, r) = self.locate(global);
        self.shards[s].doc_ids[r]
    }

    /// Concatenate all shards into one f64 matrix in shard order.
    pub fn to_matrix(&self) -> Result<crate::math::DenseMatrix> {
        let dim = self.dim()?;
        let mut data = Vec::with_capacity(self.total_rows() * dim);
        for s in &self.shards {
            data.extend(s.data.iter().map(|&v| v as f64));
        }
        Ok(crate::math::DenseMatrix::from_vec(
            self.total_rows(),
            dim,
            data,
        ))
    }
}

/// Read a newline-delimited manifest; relative entries resolve against the
/// manifest's own directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let p = Path::new(l.trim());
            if p.is_absolute() {
                p.to_owned()
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn write_manifest(entries: &[String], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(e);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load every shard listed in a manifest.
pub fn load_store(manifest: &Path) -> Result<ShardStore> {
    let paths = read_manifest(manifest)?;
    let mut shards = Vec::with_capacity(paths.len());
    for p in &paths {
        shards.push(read_shard(p)?);
    }
    Ok(ShardStore::new(shards))
}
