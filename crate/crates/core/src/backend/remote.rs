//! Client for an external model server speaking the JSON wire protocol:
//!
//! ```text
//! GET  /v1/vocab                                   -> {"vocab": [..]}
//! POST /v1/logits {"prompt": ".."}                 -> {"values": [[..]], "vocab_digest": "hex"}
//! POST /v1/invert {"embedding": [[..]], "beam_width": K}
//!                                                  -> {"candidates": [{"text": "..", "score": x}]}
//! ```

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendError, Candidate, CandidateSet, Capabilities, ModelBackend};
use crate::logits::{FilterMeta, LogitMatrix, ProjectedEmbedding};
use crate::util::vocab_digest;

/// Environment variable holding the bearer token for the model server.
pub const AUTH_TOKEN_ENV: &str = "PROMPTINV_AUTH_TOKEN";

const MAX_BODY_BYTES: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Retries after the first attempt, for transport failures and 5xx responses.
    pub retries: u32,
    pub max_in_flight: usize,
    pub auth_token: Option<String>,
    pub backoff: Duration,
    /// Filters the server applied before returning logits, if any.
    pub filter: FilterMeta,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            retries: 3,
            max_in_flight: 8,
            auth_token: std::env::var(AUTH_TOKEN_ENV).ok(),
            backoff: Duration::from_millis(50),
            filter: FilterMeta::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct VocabResponse {
    pub vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct LogitsRequest {
    pub prompt: String,
}

#[derive(Serialize, Deserialize)]
pub struct LogitsResponse {
    pub values: Vec<Vec<f64>>,
    pub vocab_digest: String,
}

#[derive(Serialize, Deserialize)]
pub struct InvertRequest {
    pub embedding: Vec<Vec<f64>>,
    pub beam_width: usize,
}

#[derive(Serialize, Deserialize)]
pub struct WireCandidate {
    pub text: String,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
pub struct InvertResponse {
    pub candidates: Vec<WireCandidate>,
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().expect("in-flight counter poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("in-flight counter poisoned");
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("in-flight counter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    name: String,
    base: String,
    agent: ureq::Agent,
    config: RemoteConfig,
    vocab: Vec<String>,
    digest: String,
    in_flight: InFlight,
}

enum Method<'a, B: Serialize> {
    Get,
    Post(&'a B),
}

impl RemoteBackend {
    fn call<B: Serialize, R: DeserializeOwned>(&self, path: &str, method: Method<'_, B>) -> Result<R, BackendError> {
        let _slot = self.in_flight.acquire();
        let url = format!("{}{}", self.base, path);
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(self.config.backoff * attempt);
            }
            let result = match &method {
                Method::Get => {
                    let mut req = self.agent.get(&url);
                    if let Some(token) = &self.config.auth_token {
                        req = req.header("Authorization", format!("Bearer {token}"));
                    }
                    req.call()
                }
                Method::Post(body) => {
                    let mut req = self.agent.post(&url);
                    if let Some(token) = &self.config.auth_token {
                        req = req.header("Authorization", format!("Bearer {token}"));
                    }
                    req.send_json(body)
                }
            };
            let mut response = match result {
                Ok(r) => r,
                Err(e) => {
                    last = format!("{url}: {e}");
                    continue;
                }
            };
            let status = response.status().as_u16();
            if status >= 500 {
                last = format!("{url}: HTTP {status}");
                continue;
            }
            let bytes = response
                .body_mut()
                .with_config()
                .limit(MAX_BODY_BYTES)
                .read_to_vec()
                .map_err(|e| BackendError::Transport(format!("{url}: {e}")))?;
            if !(200..300).contains(&status) {
                let body = String::from_utf8_lossy(&bytes);
                return Err(BackendError::Protocol(format!("{url}: HTTP {status}: {}", body.trim())));
            }
            return serde_json::from_slice(&bytes)
                .map_err(|e| BackendError::Protocol(format!("{url}: malformed response: {e}")));
        }
        Err(BackendError::Transport(last))
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    pub fn vocab_digest(&self) -> &str {
        &self.digest
    }
}

/// Connects to `config.endpoint` and caches its vocabulary.
pub fn remote_backend(config: RemoteConfig) -> Result<RemoteBackend, BackendError> {
    let base = config.endpoint.trim_end_matches('/').to_string();
    let well_formed = (base.starts_with("http://") || base.starts_with("https://"))
        && base.split("://").nth(1).is_some_and(|rest| !rest.is_empty());
    if !well_formed {
        return Err(BackendError::InvalidArgument(format!("malformed endpoint `{}`", config.endpoint)));
    }
    if config.max_in_flight == 0 {
        return Err(BackendError::InvalidArgument("max_in_flight must be at least 1".into()));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut backend = RemoteBackend {
        name: format!("remote:{base}"),
        base: base.clone(),
        agent,
        in_flight: InFlight { count: Mutex::new(0), freed: Condvar::new(), limit: config.max_in_flight },
        config,
        vocab: Vec::new(),
        digest: String::new(),
    };
    let vocab: VocabResponse = backend
        .call::<(), _>("/v1/vocab", Method::Get)
        .map_err(|e| BackendError::Handshake { endpoint: base.clone(), message: e.to_string() })?;
    if vocab.vocab.is_empty() {
        return Err(BackendError::Handshake { endpoint: base, message: "server returned an empty vocabulary".into() });
    }
    backend.digest = vocab_digest(&vocab.vocab);
    backend.vocab = vocab.vocab;
    Ok(backend)
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { query_logits: true, invert_embedding: true }
    }

    fn query_logits(&self, prompt: &str) -> Result<LogitMatrix, BackendError> {
        let resp: LogitsResponse =
            self.call("/v1/logits", Method::Post(&LogitsRequest { prompt: prompt.to_string() }))?;
        if resp.vocab_digest != self.digest {
            return Err(BackendError::Protocol(format!(
                "vocab digest changed since handshake ({} != {})",
                resp.vocab_digest, self.digest
            )));
        }
        let mut m = LogitMatrix::new(resp.values, self.vocab.clone(), FilterMeta::default())?;
        m.filter = self.config.filter;
        Ok(m)
    }

    fn invert_embedding(&self, embedding: &ProjectedEmbedding, beam_width: usize) -> Result<CandidateSet, BackendError> {
        let req = InvertRequest { embedding: embedding.rows(), beam_width };
        let resp: InvertResponse = self.call("/v1/invert", Method::Post(&req))?;
        let candidates =
            resp.candidates.into_iter().map(|c| Candidate { text: c.text, backend_score: c.score }).collect();
        Ok(CandidateSet { candidates, iteration: 0 })
    }
}
