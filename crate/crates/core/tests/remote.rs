mod common;

use std::sync::atomic::{AtomicBool, AtomicUsize};
use std::time::Duration;

use common::{conformance, StubBehaviour, StubServer};
use promptinv::backend::{self, remote_backend, BackendError, ModelBackend, RemoteConfig};
use promptinv::refine::{attack, RefinementConfig};
use promptinv::toy_world::{toy_backends, ToyBackendConfig, ToyBackends};

const TEXTS: [&str; 3] = [
    "the user liked \"Amber Tide\" and \"Night Ferry\"",
    "recommend one item for the user",
    "the user is a 30-year-old female",
];

fn small() -> ToyBackendConfig {
    ToyBackendConfig { logit_width: 64, seq_len: 8, dim: 8, max_len: 8, ..Default::default() }
}

fn toys() -> ToyBackends {
    toy_backends(TEXTS, &small()).unwrap()
}

fn serve(behaviour: StubBehaviour) -> StubServer {
    let t = toys();
    StubServer::start(t.victim, t.inverter, behaviour)
}

fn config(url: &str) -> RemoteConfig {
    let mut c = RemoteConfig::new(url);
    c.backoff = Duration::from_millis(1);
    c.timeout = Duration::from_secs(10);
    c.auth_token = None;
    c
}

#[test]
fn toy_backends_pass_conformance() {
    let t = toys();
    conformance(&t.victim, &t.inverter, &TEXTS, |p| t.inverter.embed(p).unwrap());
}

#[test]
fn remote_backend_passes_conformance() {
    let server = serve(StubBehaviour::default());
    let remote = remote_backend(config(&server.url)).unwrap();
    let local = toys();
    conformance(&remote, &remote, &TEXTS, |p| local.inverter.embed(p).unwrap());
}

#[test]
fn remote_answers_match_local_ones() {
    let server = serve(StubBehaviour::default());
    let remote = remote_backend(config(&server.url)).unwrap();
    let local = toys();
    assert_eq!(remote.vocab(), local.victim.vocab());
    for p in TEXTS {
        let a = backend::query_logits(&remote, p).unwrap();
        let b = backend::query_logits(&local.victim, p).unwrap();
        assert_eq!(a, b);
        let e = local.inverter.embed(p).unwrap();
        let a = backend::invert_embedding(&remote, &e, 4).unwrap();
        let b = backend::invert_embedding(&local.inverter, &e, 4).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn attack_over_the_wire_equals_local_attack() {
    let server = serve(StubBehaviour::default());
    let remote = remote_backend(config(&server.url)).unwrap();
    let local = toys();
    let cfg = RefinementConfig { beam_width: 3, max_iterations: 4, ..Default::default() };
    let logits = backend::query_logits(&local.victim, TEXTS[0]).unwrap();
    let a = attack(&remote, &remote, &logits, &local.weights, &cfg).unwrap();
    let b = attack(&local.victim, &local.inverter, &logits, &local.weights, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn transient_server_errors_are_retried() {
    let server = serve(StubBehaviour { fail_first: AtomicUsize::new(2), ..Default::default() });
    let remote = remote_backend(config(&server.url)).unwrap();
    assert_eq!(server.request_count(), 3);
    assert!(backend::query_logits(&remote, TEXTS[1]).is_ok());
}

#[test]
fn persistent_server_errors_exhaust_the_retries() {
    let server = serve(StubBehaviour { fail_first: AtomicUsize::new(100), ..Default::default() });
    let mut c = config(&server.url);
    c.retries = 2;
    match remote_backend(c) {
        Err(BackendError::Handshake { message, .. }) => assert!(message.contains("500"), "{message}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("handshake should fail"),
    }
    assert_eq!(server.request_count(), 3);
}

#[test]
fn vocabulary_digest_mismatch_is_rejected() {
    let server = serve(StubBehaviour { wrong_digest: AtomicBool::new(true), ..Default::default() });
    let remote = remote_backend(config(&server.url)).unwrap();
    match backend::query_logits(&remote, TEXTS[0]) {
        Err(BackendError::Protocol(m)) => assert!(m.contains("digest"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn auth_token_is_sent_and_client_errors_are_not_retried() {
    let server = serve(StubBehaviour { required_token: Some("s3cret".into()), ..Default::default() });
    assert!(matches!(remote_backend(config(&server.url)), Err(BackendError::Handshake { .. })));
    assert_eq!(server.request_count(), 1);
    let mut c = config(&server.url);
    c.auth_token = Some("s3cret".into());
    let remote = remote_backend(c).unwrap();
    assert!(backend::query_logits(&remote, TEXTS[2]).is_ok());
}

#[test]
fn unreachable_server_fails_fast() {
    let server = serve(StubBehaviour::default());
    let url = server.url.clone();
    drop(server);
    let mut c = config(&url);
    c.retries = 0;
    assert!(matches!(remote_backend(c), Err(BackendError::Handshake { .. })));
}
