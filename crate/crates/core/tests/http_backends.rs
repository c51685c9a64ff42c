mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::StubServer;
use robust_ralm::backends::{
    BackendError, Decoding, EntailmentModel, EntailmentRequest, GenerationRequest, Generator, HttpEntailment,
    HttpGenerator, HttpSettings,
};
use robust_ralm::retrieval::build::{build_index, HttpSearch};
use robust_ralm::retrieval::{Corpus, RetrievalIndex};

fn settings(url: &str) -> HttpSettings {
    let mut s = HttpSettings::new(url);
    s.timeout = Duration::from_secs(10);
    s
}

#[test]
fn generate_sends_the_wire_format() {
    let server = StubServer::start(|_| (200, r#"{"text": " 1865."}"#.into()));
    let mut s = settings(&server.url);
    s.api_key = Some("secret".into());
    let generator = HttpGenerator::new(s);
    let mut req = GenerationRequest::greedy("Question: q\n", &["\n"]);
    assert_eq!(generator.complete(&req).unwrap(), " 1865.");
    req.decoding = Decoding::Sampled { temperature: 0.7 };
    req.sample_index = 2;
    generator.complete(&req).unwrap();

    let seen = server.requests();
    assert_eq!(seen[0].path, "/generate");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[0].body["prompt"], "Question: q\n");
    assert_eq!(seen[0].body["greedy"], true);
    assert_eq!(seen[0].body["stop"], serde_json::json!(["\n"]));
    assert!(seen[0].body.get("temperature").is_none());
    assert_eq!(seen[1].body["temperature"], 0.7);
    assert_eq!(seen[1].body["sample_index"], 2);
}

#[test]
fn server_errors_are_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = StubServer::start(move |_| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            (500, "{}".into())
        } else {
            (200, r#"{"text": "ok"}"#.into())
        }
    });
    let generator = HttpGenerator::new(settings(&server.url));
    assert_eq!(generator.complete(&GenerationRequest::greedy("p", &[])).unwrap(), "ok");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_server_errors_surface_as_transport() {
    let server = StubServer::start(|_| (503, "{}".into()));
    let mut s = settings(&server.url);
    s.retries = 1;
    let err = HttpGenerator::new(s).complete(&GenerationRequest::greedy("p", &[])).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
    assert_eq!(server.requests().len(), 2);
}

#[test]
fn client_errors_and_bad_json_are_not_retried() {
    let server = StubServer::start(|_| (400, "{}".into()));
    let err = HttpGenerator::new(settings(&server.url))
        .complete(&GenerationRequest::greedy("p", &[]))
        .unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err}");
    assert_eq!(server.requests().len(), 1);

    let server = StubServer::start(|_| (200, r#"{"txt": 1}"#.into()));
    let err = HttpGenerator::new(settings(&server.url))
        .complete(&GenerationRequest::greedy("p", &[]))
        .unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut s = settings(&format!("http://127.0.0.1:{port}"));
    s.retries = 0;
    let err = HttpGenerator::new(s).complete(&GenerationRequest::greedy("p", &[])).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
}

#[test]
fn entail_returns_probabilities() {
    let server = StubServer::start(|_| {
        (200, r#"{"p_entail": 0.8, "p_neutral": 0.15, "p_contradict": 0.05}"#.into())
    });
    let nli = HttpEntailment::new(settings(&server.url));
    let p = nli
        .probabilities(&EntailmentRequest::new("The sky is blue.", "Q: what colour is the sky? A: blue"))
        .unwrap();
    assert_eq!(p.p_entail, 0.8);
    let seen = server.requests();
    assert_eq!(seen[0].path, "/entail");
    assert_eq!(seen[0].body["premise"], "The sky is blue.");
    assert_eq!(seen[0].body["hypothesis"], "Q: what colour is the sky? A: blue");
}

#[test]
fn search_snapshot_becomes_a_loadable_index() {
    let server = StubServer::start(|req| {
        let query = req.body["query"].as_str().unwrap_or_default().to_string();
        let n = if query.contains("rare") { 1 } else { req.body["num"].as_u64().unwrap() as usize };
        let results: Vec<_> = (1..=n)
            .map(|i| serde_json::json!({"title": format!("T{i}"), "text": format!("{query} hit {i}")}))
            .collect();
        (200, serde_json::json!({ "results": results }).to_string())
    });
    let questions = vec!["who sang it".to_string(), "a rare question".to_string(), " who  sang it".to_string()];
    let (records, report) = build_index(&questions, &HttpSearch::new(settings(&server.url)), Corpus::Web, 10, "stub");
    assert_eq!(server.requests().len(), 2);
    assert_eq!(server.requests()[0].body["num"], 10);
    assert_eq!(report.indexed, 2);
    assert_eq!(report.lowrank_unavailable, vec!["a rare question".to_string()]);
    let ranks: Vec<u32> = records.iter().filter(|r| r.query == "who sang it").map(|r| r.rank).collect();
    assert_eq!(ranks, (1..=10).collect::<Vec<_>>());

    let index = RetrievalIndex::from_records(records).unwrap();
    assert!(index.contains("who sang it"));
    assert_eq!(index.results("who sang it").unwrap().len(), 10);
}
