#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use promptinv::backend::{
    self, InvertRequest, InvertResponse, LogitsRequest, LogitsResponse, ModelBackend, ToyInverter, ToyVictim,
    VocabResponse, WireCandidate,
};
use promptinv::logits::ProjectedEmbedding;
use promptinv::util::vocab_digest;
use tiny_http::{Header, Method, Response, Server};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Knobs for misbehaving on purpose.
#[derive(Default)]
pub struct StubBehaviour {
    /// Answer this many requests with HTTP 500 before behaving.
    pub fail_first: AtomicUsize,
    pub wrong_digest: AtomicBool,
    pub required_token: Option<String>,
}

/// A model server over the wire protocol, backed by a toy victim and inverter.
pub struct StubServer {
    pub url: String,
    pub behaviour: Arc<StubBehaviour>,
    pub requests: Arc<AtomicUsize>,
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(victim: ToyVictim, inverter: ToyInverter, behaviour: StubBehaviour) -> Self {
        assert_eq!(victim.vocab(), inverter.vocab(), "stub serves one vocabulary");
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind stub server"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip address"));
        let behaviour = Arc::new(behaviour);
        let requests = Arc::new(AtomicUsize::new(0));
        let handle = {
            let (server, behaviour, requests) = (Arc::clone(&server), Arc::clone(&behaviour), Arc::clone(&requests));
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    let (status, body) = handle(&mut req, &victim, &inverter, &behaviour);
                    let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                    let _ = req.respond(Response::from_string(body).with_status_code(status).with_header(header));
                }
            })
        };
        Self { url, behaviour, requests, server, handle: Some(handle) }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle(req: &mut tiny_http::Request, victim: &ToyVictim, inverter: &ToyInverter, b: &StubBehaviour) -> (u16, String) {
    let failing = b.fail_first.load(Ordering::SeqCst);
    if failing > 0 {
        b.fail_first.store(failing - 1, Ordering::SeqCst);
        return (500, r#"{"error":"warming up"}"#.into());
    }
    if let Some(token) = &b.required_token {
        let want = format!("Bearer {token}");
        let ok = req.headers().iter().any(|h| h.field.equiv("Authorization") && h.value.as_str() == want);
        if !ok {
            return (401, r#"{"error":"unauthorized"}"#.into());
        }
    }
    let mut body = String::new();
    let _ = req.as_reader().read_to_string(&mut body);
    match (req.method(), req.url()) {
        (Method::Get, "/v1/vocab") => {
            (200, serde_json::to_string(&VocabResponse { vocab: victim.vocab().to_vec() }).unwrap())
        }
        (Method::Post, "/v1/logits") => {
            let Ok(r) = serde_json::from_str::<LogitsRequest>(&body) else { return (400, "{}".into()) };
            let m = backend::query_logits(victim, &r.prompt).unwrap();
            let mut digest = vocab_digest(victim.vocab());
            if b.wrong_digest.load(Ordering::SeqCst) {
                digest = "0".repeat(64);
            }
            (200, serde_json::to_string(&LogitsResponse { values: m.values, vocab_digest: digest }).unwrap())
        }
        (Method::Post, "/v1/invert") => {
            let Ok(r) = serde_json::from_str::<InvertRequest>(&body) else { return (400, "{}".into()) };
            let e = ProjectedEmbedding::from_rows(&r.embedding, inverter.weights().digest()).unwrap();
            match backend::invert_embedding(inverter, &e, r.beam_width) {
                Ok(set) => {
                    let candidates = set
                        .candidates
                        .into_iter()
                        .map(|c| WireCandidate { text: c.text, score: c.backend_score })
                        .collect();
                    (200, serde_json::to_string(&InvertResponse { candidates }).unwrap())
                }
                Err(e) => (422, format!("{{\"error\":{:?}}}", e.to_string())),
            }
        }
        _ => (404, r#"{"error":"not found"}"#.into()),
    }
}

/// Behaviour every victim/inverter pair must show, whatever the transport.
pub fn conformance(victim: &dyn ModelBackend, inverter: &dyn ModelBackend, probes: &[&str], embed: impl Fn(&str) -> ProjectedEmbedding) {
    let vocab = victim.vocab();
    assert!(!vocab.is_empty());
    let distinct: std::collections::HashSet<_> = vocab.iter().collect();
    assert_eq!(distinct.len(), vocab.len(), "vocabulary entries are distinct");

    for p in probes {
        let a = backend::query_logits(victim, p).unwrap();
        let b = backend::query_logits(victim, p).unwrap();
        assert_eq!(a, b, "logits are deterministic");
        assert!(a.values.iter().all(|row| row.len() == vocab.len()));
        assert!(a.values.iter().flatten().all(|v| v.is_finite()));
    }

    for p in probes {
        let e = embed(p);
        for k in [1, 3, 5] {
            let set = backend::invert_embedding(inverter, &e, k).unwrap();
            assert!(!set.is_empty() && set.len() <= k);
            let scores: Vec<f64> = set.candidates.iter().map(|c| c.backend_score).collect();
            assert!(scores.windows(2).all(|w| w[0] >= w[1]), "candidates best first: {scores:?}");
            let again = backend::invert_embedding(inverter, &e, k).unwrap();
            assert_eq!(set, again, "inversion is deterministic");
        }
    }
}
