//! Victim and inverter backends.
//!
//! [`ModelBackend`] is the black-box capability surface the attack needs: next-token
//! logits for a prompt, and beam-searched candidate prompts for an embedding. The
//! toy backends are pure functions of their configuration; [`remote`] speaks the
//! JSON wire protocol to an external model server.

pub mod remote;
pub mod toy;

pub use remote::{
    remote_backend, InvertRequest, InvertResponse, LogitsRequest, LogitsResponse, RemoteBackend, RemoteConfig,
    VocabResponse, WireCandidate, AUTH_TOKEN_ENV,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logits::{LogitError, LogitMatrix, ProjectedEmbedding};
use crate::util::normalize_text;


pub use toy::{toy_invert, toy_victim_logits, ToyInverter, ToyInverterConfig, ToyVictim, ToyVictimConfig};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend `{backend}` does not support {capability}")]
    CapabilityMissing { backend: String, capability: &'static str },
    #[error("transport error (retryable): {0}")]
    Transport(String),
    #[error("handshake with {endpoint} failed: {message}")]
    Handshake { endpoint: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token `{0}` is not in the backend vocabulary")]
    UnknownToken(String),
    #[error(transparent)]
    Logits(#[from] LogitError),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub query_logits: bool,
    pub invert_embedding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub backend_score: f64,
}

/// Candidate prompts from one inversion call, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub iteration: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.text.as_str())
    }

    /// Sorts best first (stable), drops whitespace-normalised duplicates and truncates to `k`.
    pub fn normalized(mut self, k: usize) -> Self {
        self.candidates.sort_by(|a, b| b.backend_score.total_cmp(&a.backend_score));
        let mut seen = std::collections::HashSet::new();
        self.candidates.retain(|c| seen.insert(normalize_text(&c.text)));
        self.candidates.truncate(k);
        self
    }
}

/// The attack's view of a model: a vocabulary plus optional capabilities.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn vocab(&self) -> &[String];

    fn capabilities(&self) -> Capabilities;

    fn query_logits(&self, prompt: &str) -> Result<LogitMatrix, BackendError> {
        let _ = prompt;
        Err(BackendError::CapabilityMissing { backend: self.name().to_string(), capability: "query_logits" })
    }

    fn invert_embedding(&self, embedding: &ProjectedEmbedding, beam_width: usize) -> Result<CandidateSet, BackendError> {
        let _ = (embedding, beam_width);
        Err(BackendError::CapabilityMissing { backend: self.name().to_string(), capability: "invert_embedding" })
    }
}

/// Checked `query_logits`: capability present and the result indexed by the backend vocabulary.
pub fn query_logits(backend: &dyn ModelBackend, prompt: &str) -> Result<LogitMatrix, BackendError> {
    if !backend.capabilities().query_logits {
        return Err(BackendError::CapabilityMissing { backend: backend.name().to_string(), capability: "query_logits" });
    }
    let m = backend.query_logits(prompt)?;
    if m.vocab.as_slice() != backend.vocab() {
        return Err(BackendError::Protocol(format!("{} returned logits over a different vocabulary", backend.name())));
    }
    m.validate()?;
    Ok(m)
}

/// Checked `invert_embedding`: `1 <= |result| <= k`, distinct texts, best first.
pub fn invert_embedding(
    backend: &dyn ModelBackend,
    embedding: &ProjectedEmbedding,
    beam_width: usize,
) -> Result<CandidateSet, BackendError> {
    if beam_width < 1 {
        return Err(BackendError::InvalidArgument("beam width must be at least 1".into()));
    }
    if !backend.capabilities().invert_embedding {
        return Err(BackendError::CapabilityMissing {
            backend: backend.name().to_string(),
            capability: "invert_embedding",
        });
    }
    let set = backend.invert_embedding(embedding, beam_width)?.normalized(beam_width);
    if set.is_empty() {
        return Err(BackendError::Protocol(format!("{} returned no candidates", backend.name())));
    }
    Ok(set)
}

/// Token ids over a backend vocabulary together with the text they spell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub tokens: Vec<usize>,
    pub text: String,
}

impl TokenizedText {
    /// Whitespace tokenisation against `vocab`; unknown tokens are an error.
    pub fn whitespace(text: &str, vocab: &[String]) -> Result<Self, BackendError> {
        let index: std::collections::HashMap<&str, usize> =
            vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).rev().collect();
        let tokens = text
            .split_whitespace()
            .map(|t| index.get(t).copied().ok_or_else(|| BackendError::UnknownToken(t.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { tokens, text: normalize_text(text) })
    }

    pub fn detokenize(tokens: &[usize], vocab: &[String]) -> String {
        tokens.iter().map(|&t| vocab[t].as_str()).collect::<Vec<_>>().join(" ")
    }
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

/// Mean negative log-likelihood of `target` given `prompt`: at step `t` the backend is
/// queried with the prompt followed by `target[..t]` and its last row is read as the
/// next-token distribution.
pub fn sequence_nll(backend: &dyn ModelBackend, prompt: &str, target: &TokenizedText) -> Result<f64, BackendError> {
    if target.tokens.is_empty() {
        return Err(BackendError::InvalidArgument("empty target sequence".into()));
    }
    let vocab = backend.vocab();
    let mut total = 0.0;
    for t in 0..target.tokens.len() {
        let prefix = TokenizedText::detokenize(&target.tokens[..t], vocab);
        let context = match (prompt.is_empty(), prefix.is_empty()) {
            (_, true) => prompt.to_string(),
            (true, false) => prefix,
            (false, false) => format!("{prompt} {prefix}"),
        };
        let logits = query_logits(backend, &context)?;
        let row = logits.values.last().expect("validated logits have rows");
        let id = target.tokens[t];
        if id >= row.len() {
            return Err(BackendError::InvalidArgument(format!("token id {id} outside vocabulary")));
        }
        total -= log_softmax_at(row, id);
    }
    Ok((total / target.tokens.len() as f64).max(0.0))
}
