//! Logit processing: filtering, vocabulary alignment and projection to a
//! fixed `(T, d)` embedding tensor consumed by the inverter.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::util::{vocab_digest, write_atomic};

/// Value written for filtered-out or unmapped entries. Finite, so softmax and cosine stay finite.
pub const FLOOR_LOGIT: f64 = -1e4;

pub const DEFAULT_SEQ_LEN: usize = 64;
pub const DEFAULT_EMBED_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum LogitError {
    #[error("top_p must lie in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("logit matrix contains non-finite values")]
    NonFinite,
    #[error("logit rows have width {row} but the vocabulary has {vocab} tokens")]
    VocabMismatch { row: usize, vocab: usize },
    #[error("logit matrix has no rows")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("projection weights digest mismatch (file says {stored}, contents hash to {computed})")]
    DigestMismatch { stored: String, computed: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterMeta {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

impl Default for FilterMeta {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: None, top_p: None }
    }
}

impl FilterMeta {
    pub fn is_identity(&self) -> bool {
        self.temperature == 1.0 && self.top_k.is_none() && self.top_p.is_none()
    }

    pub fn validate(&self) -> Result<(), LogitError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LogitError::InvalidTemperature(self.temperature));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(LogitError::InvalidTopP(p));
            }
        }
        if self.top_k == Some(0) {
            return Err(LogitError::InvalidTopK);
        }
        Ok(())
    }
}

/// `N x V` next-token logits with the vocabulary they index and the filters still to apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    pub values: Vec<Vec<f64>>,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub filter: FilterMeta,
}

impl LogitMatrix {
    pub fn new(values: Vec<Vec<f64>>, vocab: Vec<String>, filter: FilterMeta) -> Result<Self, LogitError> {
        let m = Self { values, vocab, filter };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), LogitError> {
        if self.values.is_empty() {
            return Err(LogitError::Empty);
        }
        for row in &self.values {
            if row.len() != self.vocab.len() {
                return Err(LogitError::VocabMismatch { row: row.len(), vocab: self.vocab.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LogitError::NonFinite);
            }
        }
        self.filter.validate()
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    /// Reads a `{vocab: [...], values: [[...]]}` fixture.
    pub fn from_fixture(path: &Path) -> Result<Self, LogitError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| LogitError::Io { path: path.display().to_string(), source })?;
        let m: LogitMatrix = serde_json::from_str(&text)
            .map_err(|e| LogitError::Format { path: path.display().to_string(), message: e.to_string() })?;
        m.validate()?;
        Ok(m)
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indices sorted by value descending, lower index first on ties.
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn filter_row(row: &[f64], meta: &FilterMeta) -> Vec<f64> {
    let mut out: Vec<f64> = row.iter().map(|v| v / meta.temperature).collect();
    if let Some(k) = meta.top_k {
        for &i in ranked(&out).iter().skip(k) {
            out[i] = FLOOR_LOGIT;
        }
    }
    if let Some(p) = meta.top_p {
        let probs = softmax(&out);
        let order = ranked(&out);
        let mut mass = 0.0;
        let mut keep = 0;
        for &i in &order {
            keep += 1;
            mass += probs[i];
            if mass >= p {
                break;
            }
        }
        for &i in order.iter().skip(keep) {
            out[i] = FLOOR_LOGIT;
        }
    }
    out
}

/// Applies temperature, then top-k, then nucleus filtering as recorded in `raw.filter`.
/// The result carries identity filter settings.
pub fn apply_filters(raw: &LogitMatrix) -> Result<LogitMatrix, LogitError> {
    raw.filter.validate()?;
    let values = if raw.filter.is_identity() {
        raw.values.clone()
    } else {
        raw.values.iter().map(|row| filter_row(row, &raw.filter)).collect()
    };
    Ok(LogitMatrix { values, vocab: raw.vocab.clone(), filter: FilterMeta::default() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowReduction {
    /// Keep the final row: the next-token distribution.
    #[default]
    Last,
    Mean,
}

/// One row of logits indexed by the inverter vocabulary (`B = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedLogits {
    pub values: Vec<f64>,
    pub target_vocab_digest: String,
}

pub fn align_vocab(src: &LogitMatrix, target_vocab: &[String], reduction: RowReduction) -> AlignedLogits {
    let row: Vec<f64> = match reduction {
        RowReduction::Last => src.values.last().cloned().unwrap_or_default(),
        RowReduction::Mean => {
            let n = src.values.len().max(1) as f64;
            let mut acc = vec![0.0; src.vocab.len()];
            for r in &src.values {
                for (a, v) in acc.iter_mut().zip(r) {
                    *a += v;
                }
            }
            acc.into_iter().map(|v| v / n).collect()
        }
    };
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(src.vocab.len());
    for (i, tok) in src.vocab.iter().enumerate() {
        index.entry(tok.as_str()).or_insert(i);
    }
    let values = target_vocab
        .iter()
        .map(|tok| index.get(tok.as_str()).and_then(|&i| row.get(i).copied()).unwrap_or(FLOOR_LOGIT))
        .collect();
    AlignedLogits { values, target_vocab_digest: vocab_digest(target_vocab) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionShape {
    /// Width of the aligned logits (`V'`).
    pub input_dim: usize,
    pub seq_len: usize,
    pub dim: usize,
}

impl ProjectionShape {
    pub fn output_len(&self) -> usize {
        self.seq_len * self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Loaded,
    SeededRandom,
}

/// Affine map from aligned logits to a flattened `(T, d)` tensor.
///
/// The weights are immutable once built; the digest is computed once and cached.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    shape: ProjectionShape,
    /// Row-major `input_dim x (seq_len * dim)`.
    matrix: Vec<f64>,
    bias: Vec<f64>,
    provenance: Provenance,
    digest: OnceLock<String>,
}

impl PartialEq for ProjectionWeights {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.matrix == other.matrix && self.bias == other.bias
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    input_dim: usize,
    seq_len: usize,
    dim: usize,
    matrix: Vec<f64>,
    bias: Vec<f64>,
    digest: String,
}

impl ProjectionWeights {
    pub fn new(shape: ProjectionShape, matrix: Vec<f64>, bias: Vec<f64>) -> Result<Self, LogitError> {
        let w = Self { shape, matrix, bias, provenance: Provenance::Loaded, digest: OnceLock::new() };
        w.check()?;
        Ok(w)
    }

    fn check(&self) -> Result<(), LogitError> {
        let out = self.shape.output_len();
        if self.matrix.len() != self.shape.input_dim * out || self.bias.len() != out {
            return Err(LogitError::DimensionMismatch {
                expected: format!("matrix {}x{out}, bias {out}", self.shape.input_dim),
                got: format!("matrix {} values, bias {}", self.matrix.len(), self.bias.len()),
            });
        }
        if self.matrix.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(LogitError::NonFinite);
        }
        Ok(())
    }

    /// Uniform entries scaled to unit variance per output before the bias; a small bias.
    pub fn seeded_random(shape: ProjectionShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / shape.input_dim.max(1) as f64).sqrt();
        let matrix = (0..shape.input_dim * shape.output_len())
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        let bias = (0..shape.output_len()).map(|_| rng.random_range(-1.0..1.0) * 0.01).collect();
        Self { shape, matrix, bias, provenance: Provenance::SeededRandom, digest: OnceLock::new() }
    }

    pub fn identity(shape: ProjectionShape) -> Self {
        let out = shape.output_len();
        let mut matrix = vec![0.0; shape.input_dim * out];
        for i in 0..shape.input_dim.min(out) {
            matrix[i * out + i] = 1.0;
        }
        Self { shape, matrix, bias: vec![0.0; out], provenance: Provenance::Loaded, digest: OnceLock::new() }
    }

    pub fn shape(&self) -> ProjectionShape {
        self.shape
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let out = self.shape.output_len();
        &self.matrix[i * out..(i + 1) * out]
    }

    pub fn digest(&self) -> String {
        self.digest.get_or_init(|| self.compute_digest()).clone()
    }

    fn compute_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for d in [self.shape.input_dim, self.shape.seq_len, self.shape.dim] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in self.matrix.iter().chain(&self.bias) {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), LogitError> {
        let file = WeightsFile {
            input_dim: self.shape.input_dim,
            seq_len: self.shape.seq_len,
            dim: self.shape.dim,
            matrix: self.matrix.clone(),
            bias: self.bias.clone(),
            digest: self.digest(),
        };
        let bytes = serde_json::to_vec(&file).expect("weights serialise");
        write_atomic(path, &bytes).map_err(|source| LogitError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, LogitError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| LogitError::Io { path: path.display().to_string(), source })?;
        let file: WeightsFile = serde_json::from_str(&text)
            .map_err(|e| LogitError::Format { path: path.display().to_string(), message: e.to_string() })?;
        let shape = ProjectionShape { input_dim: file.input_dim, seq_len: file.seq_len, dim: file.dim };
        let w = Self::new(shape, file.matrix, file.bias)?;
        let computed = w.digest();
        if computed != file.digest {
            return Err(LogitError::DigestMismatch { stored: file.digest, computed });
        }
        Ok(w)
    }
}

/// Flattened `(T, d)` embedding of one logit row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedEmbedding {
    pub seq_len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub projection_digest: String,
}

impl ProjectedEmbedding {
    pub fn from_rows(rows: &[Vec<f64>], projection_digest: String) -> Result<Self, LogitError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || rows.iter().any(|r| r.len() != dim) || dim == 0 {
            return Err(LogitError::DimensionMismatch {
                expected: "non-empty rectangular (T, d) rows".into(),
                got: format!("{} rows", rows.len()),
            });
        }
        Ok(Self { seq_len: rows.len(), dim, values: rows.concat(), projection_digest })
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.dim.max(1)).map(|c| c.to_vec()).collect()
    }
}

/// `e = reshape(h W + bias, (T, d))`.
pub fn project(h: &AlignedLogits, w: &ProjectionWeights) -> Result<ProjectedEmbedding, LogitError> {
    if h.values.len() != w.shape.input_dim {
        return Err(LogitError::DimensionMismatch {
            expected: format!("aligned width {}", w.shape.input_dim),
            got: format!("aligned width {}", h.values.len()),
        });
    }
    let mut out = w.bias.clone();
    for (i, &hv) in h.values.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += hv * wv;
        }
    }
    Ok(ProjectedEmbedding {
        seq_len: w.shape.seq_len,
        dim: w.shape.dim,
        values: out,
        projection_digest: w.digest(),
    })
}
