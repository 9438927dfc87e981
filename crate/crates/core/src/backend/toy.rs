//! Deterministic desk-scale stand-ins for the victim recommender and the inverter.
//!
//! The toy victim's logits are a sum of seeded sparse hash embeddings, one per
//! n-gram of the whitespace-tokenised prompt (with a start marker, higher orders
//! weighted up), so logits encode prompt content exactly up to hash collisions. The toy inverter beam-searches token
//! sequences whose projected victim logits are most cosine-similar to a target
//! embedding.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BackendError, Candidate, CandidateSet, Capabilities, ModelBackend};
use crate::logits::{align_vocab, project, FilterMeta, LogitMatrix, ProjectedEmbedding, ProjectionWeights, RowReduction};
use crate::refine::cosine_similarity;
use crate::util::{fnv1a64_feed, fnv1a64_start, splitmix64};

/// Non-zero coordinates per n-gram embedding.
pub const HASH_ACTIVE_DIMS: usize = 8;

/// Start-of-prompt marker preceding the first token in higher-order n-grams.
pub const BOS: &str = "\u{2}<s>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyVictimConfig {
    pub vocab: Vec<String>,
    /// Width of the logit row; equal to the vocabulary size.
    pub feature_dim: usize,
    pub hash_seed: u64,
    pub ngram_order: usize,
    /// Trailing vocabulary entries that widen the logit row but never occur in prompts.
    #[serde(default)]
    pub reserved: usize,
}

impl ToyVictimConfig {
    pub fn new(vocab: Vec<String>, hash_seed: u64) -> Self {
        let feature_dim = vocab.len();
        Self { vocab, feature_dim, hash_seed, ngram_order: 2, reserved: 0 }
    }

    /// Sorted distinct whitespace tokens of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, hash_seed: u64) -> Self {
        let vocab: std::collections::BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        Self::new(vocab.into_iter().map(String::from).collect(), hash_seed)
    }

    /// Pads the vocabulary with reserved `<extra_i>` tokens up to `width` entries.
    pub fn padded_to(mut self, width: usize) -> Self {
        let extra = width.saturating_sub(self.vocab.len());
        let start = self.reserved;
        self.vocab.extend((start..start + extra).map(|i| format!("<extra_{i}>")));
        self.reserved += extra;
        self.feature_dim = self.vocab.len();
        self
    }

    /// Vocabulary entries that can appear in prompts.
    pub fn searchable(&self) -> &[String] {
        &self.vocab[..self.vocab.len() - self.reserved.min(self.vocab.len())]
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.vocab.is_empty() {
            return Err(BackendError::InvalidArgument("toy vocabulary is empty".into()));
        }
        if self.feature_dim != self.vocab.len() {
            return Err(BackendError::InvalidArgument(format!(
                "feature_dim {} must equal the vocabulary size {}",
                self.feature_dim,
                self.vocab.len()
            )));
        }
        if self.reserved >= self.vocab.len() {
            return Err(BackendError::InvalidArgument("no searchable tokens outside the reserved range".into()));
        }
        if self.ngram_order < 1 {
            return Err(BackendError::InvalidArgument("ngram_order must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash state after the context of an n-gram of order `n` (its first `n - 1`
    /// tokens and separators); finish with [`Self::sparse_from_state`].
    pub fn context_state(&self, n: usize, context: &[&str]) -> u64 {
        let mut h = fnv1a64_start(self.hash_seed ^ (n as u64).rotate_left(32));
        for tok in context {
            h = fnv1a64_feed(h, tok.as_bytes());
            h = fnv1a64_feed(h, &[0x1f]);
        }
        h
    }

    /// Writes the `HASH_ACTIVE_DIMS` coordinates of the order-`n` n-gram whose context
    /// state is `state` and whose last token is `token`.
    pub fn sparse_from_state(&self, state: u64, n: usize, token: &str, out: &mut [(usize, f64)]) {
        let mut state = fnv1a64_feed(state, token.as_bytes());
        let weight = n as f64;
        for slot in out.iter_mut().take(HASH_ACTIVE_DIMS) {
            let idx = (splitmix64(&mut state) % self.feature_dim as u64) as usize;
            let unit = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
            *slot = (idx, weight * (2.0 * unit - 1.0));
        }
    }

    /// Sparse embedding of one n-gram: `HASH_ACTIVE_DIMS` (index, value) pairs with
    /// values in `[-n, n)` for an n-gram.
    pub fn ngram_embedding(&self, ngram: &[&str]) -> Vec<(usize, f64)> {
        let (last, context) = ngram.split_last().expect("non-empty n-gram");
        let mut out = vec![(0, 0.0); HASH_ACTIVE_DIMS];
        self.sparse_from_state(self.context_state(ngram.len(), context), ngram.len(), last, &mut out);
        out
    }

    /// The n-grams ending at `token` after `prefix` (most recent last), shortest first.
    pub fn ngrams_ending_at<'a>(&self, prefix: &[&'a str], token: &'a str) -> Vec<Vec<&'a str>> {
        let mut out = vec![vec![token]];
        for n in 2..=self.ngram_order {
            let ctx = n - 1;
            let mut gram: Vec<&str> = if prefix.len() >= ctx {
                prefix[prefix.len() - ctx..].to_vec()
            } else if prefix.len() + 1 == ctx {
                std::iter::once(BOS).chain(prefix.iter().copied()).collect()
            } else {
                break;
            };
            gram.push(token);
            out.push(gram);
        }
        out
    }

    /// Dense logit row of a prompt.
    pub fn logit_row(&self, prompt: &str) -> Vec<f64> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        let mut row = vec![0.0; self.feature_dim];
        for i in 0..tokens.len() {
            for gram in self.ngrams_ending_at(&tokens[..i], tokens[i]) {
                for (j, v) in self.ngram_embedding(&gram) {
                    row[j] += v;
                }
            }
        }
        row
    }
}

/// One-row logit matrix: the sum of the prompt's n-gram hash embeddings.
pub fn toy_victim_logits(config: &ToyVictimConfig, prompt: &str) -> LogitMatrix {
    LogitMatrix { values: vec![config.logit_row(prompt)], vocab: config.vocab.clone(), filter: FilterMeta::default() }
}

#[derive(Debug, Clone)]
pub struct ToyVictim {
    config: ToyVictimConfig,
}

impl ToyVictim {
    pub fn new(config: ToyVictimConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ToyVictimConfig {
        &self.config
    }
}

impl ModelBackend for ToyVictim {
    fn name(&self) -> &str {
        "toy-victim"
    }

    fn vocab(&self) -> &[String] {
        &self.config.vocab
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { query_logits: true, invert_embedding: false }
    }

    fn query_logits(&self, prompt: &str) -> Result<LogitMatrix, BackendError> {
        Ok(toy_victim_logits(&self.config, prompt))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyInverterConfig {
    /// The inverter's model of the victim.
    pub model: ToyVictimConfig,
    /// Longest hypothesis, in tokens.
    pub max_len: usize,
    /// Steps without improving on the best hypothesis before the search stops.
    pub patience: usize,
}

impl ToyInverterConfig {
    pub fn new(model: ToyVictimConfig, max_len: usize) -> Self {
        Self { model, max_len, patience: 3 }
    }
}

/// Precomputed quadratic-form terms of the projection, for incremental cosine scoring.
struct ProjectionGram {
    /// `W W^T`, row-major `V x V`.
    gram: Vec<f64>,
    /// `W bias`.
    w_bias: Vec<f64>,
    bias_sq: f64,
}

impl ProjectionGram {
    fn new(w: &ProjectionWeights) -> Self {
        let v = w.shape().input_dim;
        let rows: Vec<Vec<f64>> = (0..v)
            .into_par_iter()
            .map(|i| (0..=i).map(|j| dot(w.row(i), w.row(j))).collect())
            .collect();
        let mut gram = vec![0.0; v * v];
        for (i, row) in rows.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                gram[i * v + j] = g;
                gram[j * v + i] = g;
            }
        }
        let w_bias = (0..v).map(|i| dot(w.row(i), w.bias())).collect();
        Self { gram, w_bias, bias_sq: dot(w.bias(), w.bias()) }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    /// `G h`.
    gram_h: Vec<f64>,
    /// `h^T G h`.
    quad: f64,
    /// `h . (W bias)`.
    h_wbias: f64,
    /// `h . (W e_target)`.
    h_target: f64,
    score: f64,
}

struct Expansion {
    score: f64,
    beam: usize,
    token: u32,
}

pub struct ToyInverter {
    config: ToyInverterConfig,
    weights: Arc<ProjectionWeights>,
    unigrams: Vec<Vec<(usize, f64)>>,
    gram: OnceLock<ProjectionGram>,
}

impl ToyInverter {
    pub fn new(config: ToyInverterConfig, weights: Arc<ProjectionWeights>) -> Result<Self, BackendError> {
        config.model.validate()?;
        if weights.shape().input_dim != config.model.vocab.len() {
            return Err(BackendError::InvalidArgument(format!(
                "projection input width {} does not match the inverter vocabulary ({})",
                weights.shape().input_dim,
                config.model.vocab.len()
            )));
        }
        if config.max_len < 1 {
            return Err(BackendError::InvalidArgument("max_len must be at least 1".into()));
        }
        let unigrams = config.model.vocab.iter().map(|t| config.model.ngram_embedding(&[t.as_str()])).collect();
        Ok(Self { config, weights, unigrams, gram: OnceLock::new() })
    }

    pub fn config(&self) -> &ToyInverterConfig {
        &self.config
    }

    pub fn weights(&self) -> &Arc<ProjectionWeights> {
        &self.weights
    }

    /// The literal chain: victim logits, alignment, projection.
    pub fn embed(&self, prompt: &str) -> Result<ProjectedEmbedding, BackendError> {
        let logits = toy_victim_logits(&self.config.model, prompt);
        let h = align_vocab(&logits, &self.config.model.vocab, RowReduction::Last);
        Ok(project(&h, &self.weights)?)
    }

    fn text(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.config.model.vocab[t as usize].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Context hash states of the higher-order n-grams completed by a token appended to `prefix`.
    fn context_states(&self, prefix: &[u32]) -> Vec<(usize, u64)> {
        let model = &self.config.model;
        let mut out = Vec::with_capacity(model.ngram_order.saturating_sub(1));
        for n in 2..=model.ngram_order {
            let ctx = n - 1;
            let tail = &prefix[prefix.len().saturating_sub(ctx)..];
            let words = tail.iter().map(|&t| model.vocab[t as usize].as_str());
            let context: Vec<&str> = if prefix.len() >= ctx {
                words.collect()
            } else if prefix.len() + 1 == ctx {
                std::iter::once(BOS).chain(words).collect()
            } else {
                break;
            };
            out.push((n, model.context_state(n, &context)));
        }
        out
    }

    /// Sparse change of `h` when `token` is appended to a prefix with the given context states.
    fn delta_into(&self, contexts: &[(usize, u64)], token: u32, buf: &mut Vec<(usize, f64)>) {
        let model = &self.config.model;
        buf.clear();
        buf.extend_from_slice(&self.unigrams[token as usize]);
        for &(n, state) in contexts {
            let start = buf.len();
            buf.resize(start + HASH_ACTIVE_DIMS, (0, 0.0));
            model.sparse_from_state(state, n, &model.vocab[token as usize], &mut buf[start..]);
        }
    }

    fn delta(&self, prefix: &[u32], token: u32) -> Vec<(usize, f64)> {
        let mut buf = Vec::new();
        self.delta_into(&self.context_states(prefix), token, &mut buf);
        buf
    }

    /// Beam search over the vocabulary. Every beam hypothesis at every step is a
    /// finished candidate; the top `beam_width` distinct ones are returned with
    /// their exact cosine similarity to `target`, best first.
    pub fn invert(&self, target: &ProjectedEmbedding, beam_width: usize) -> Result<CandidateSet, BackendError> {
        if beam_width < 1 {
            return Err(BackendError::InvalidArgument("beam width must be at least 1".into()));
        }
        let w = &self.weights;
        if target.values.len() != w.shape().output_len() {
            return Err(BackendError::InvalidArgument(format!(
                "embedding has {} values, projection emits {}",
                target.values.len(),
                w.shape().output_len()
            )));
        }
        let gram = self.gram.get_or_init(|| ProjectionGram::new(w));
        let v = self.config.model.vocab.len();
        let searchable = self.config.model.searchable().len() as u32;
        let w_target: Vec<f64> = (0..v).map(|i| dot(w.row(i), &target.values)).collect();
        let bias_target = dot(w.bias(), &target.values);
        let target_norm = dot(&target.values, &target.values).sqrt();

        let cosine = |h_target: f64, quad: f64, h_wbias: f64| -> f64 {
            let norm_sq = quad + 2.0 * h_wbias + gram.bias_sq;
            if target_norm == 0.0 || norm_sq <= 0.0 {
                0.0
            } else {
                (h_target + bias_target) / (norm_sq.sqrt() * target_norm)
            }
        };

        let root = Hypothesis { tokens: vec![], gram_h: vec![0.0; v], quad: 0.0, h_wbias: 0.0, h_target: 0.0, score: 0.0 };
        let mut beams = vec![root];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0;

        let w_target = &w_target;
        let cosine = &cosine;
        for _ in 0..self.config.max_len {
            let mut expansions: Vec<Expansion> = beams
                .par_iter()
                .enumerate()
                .flat_map_iter(|(b, hyp)| {
                    let contexts = self.context_states(&hyp.tokens);
                    let mut d = Vec::with_capacity(HASH_ACTIVE_DIMS * self.config.model.ngram_order);
                    (0..searchable).map(move |t| {
                        self.delta_into(&contexts, t, &mut d);
                        let mut lin = 0.0;
                        let (mut d_target, mut d_wbias) = (0.0, 0.0);
                        for &(i, x) in &d {
                            lin += x * hyp.gram_h[i];
                            d_target += x * w_target[i];
                            d_wbias += x * gram.w_bias[i];
                        }
                        let mut dgd = 0.0;
                        for &(i, x) in &d {
                            let row = &gram.gram[i * v..(i + 1) * v];
                            let mut acc = 0.0;
                            for &(j, y) in &d {
                                acc += y * row[j];
                            }
                            dgd += x * acc;
                        }
                        let score = cosine(hyp.h_target + d_target, hyp.quad + 2.0 * lin + dgd, hyp.h_wbias + d_wbias);
                        Expansion { score, beam: b, token: t }
                    })
                })
                .collect();
            if expansions.is_empty() {
                break;
            }
            let order = |a: &Expansion, b: &Expansion| {
                b.score.total_cmp(&a.score).then(a.beam.cmp(&b.beam)).then(a.token.cmp(&b.token))
            };
            if expansions.len() > beam_width {
                expansions.select_nth_unstable_by(beam_width - 1, order);
                expansions.truncate(beam_width);
            }
            expansions.sort_by(order);

            beams = expansions
                .iter()
                .map(|ex| {
                    let parent = &beams[ex.beam];
                    let d = self.delta(&parent.tokens, ex.token);
                    let mut next = parent.clone();
                    let mut lin = 0.0;
                    let mut dgd = 0.0;
                    for &(i, x) in &d {
                        lin += x * parent.gram_h[i];
                        next.h_target += x * w_target[i];
                        next.h_wbias += x * gram.w_bias[i];
                        let row = &gram.gram[i * v..(i + 1) * v];
                        for &(j, y) in &d {
                            dgd += x * y * row[j];
                        }
                        for (g, r) in next.gram_h.iter_mut().zip(row) {
                            *g += x * r;
                        }
                    }
                    next.quad = parent.quad + 2.0 * lin + dgd;
                    next.tokens.push(ex.token);
                    next.score = ex.score;
                    next
                })
                .collect();

            let step_best = beams.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            finished.extend(beams.iter().map(|h| (h.tokens.clone(), h.score)));
            if step_best > best {
                best = step_best;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    break;
                }
            }
        }

        // stable: earlier (shorter) hypotheses win ties
        finished.sort_by(|a, b| b.1.total_cmp(&a.1));
        finished.truncate(beam_width);
        let mut candidates = finished
            .par_iter()
            .map(|(tokens, _)| {
                let text = self.text(tokens);
                let e = self.embed(&text)?;
                let score = cosine_similarity(&e.values, &target.values).value;
                Ok(Candidate { text, backend_score: score })
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        candidates.sort_by(|a, b| b.backend_score.total_cmp(&a.backend_score));
        Ok(CandidateSet { candidates, iteration: 0 })
    }
}

/// Beam-search inversion with the toy inverter.
pub fn toy_invert(inverter: &ToyInverter, target: &ProjectedEmbedding, beam_width: usize) -> Result<CandidateSet, BackendError> {
    inverter.invert(target, beam_width)
}

impl ModelBackend for ToyInverter {
    fn name(&self) -> &str {
        "toy-inverter"
    }

    fn vocab(&self) -> &[String] {
        &self.config.model.vocab
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { query_logits: false, invert_embedding: true }
    }

    fn invert_embedding(&self, embedding: &ProjectedEmbedding, beam_width: usize) -> Result<CandidateSet, BackendError> {
        self.invert(embedding, beam_width)
    }
}
