use std::collections::HashMap;
use std::time::Duration;

use parallax_gateway::{
    answer_all, build_prompt, Client, Decoding, EndpointConfig, Failure, GatewayError, MockMode, MockServer,
    PromptTemplate, Transcript,
};

fn bundle(question: &str) -> parallax_gateway::PromptBundle {
    let triples = [["berlin".to_string(), "capital_of".to_string(), "germany".to_string()]];
    build_prompt(question, &triples, &PromptTemplate::grounded(), Decoding::default(), None, false).unwrap()
}

fn client(server: &MockServer, timeout_ms: u64) -> Client {
    Client::new(EndpointConfig {
        base_url: server.base_url(),
        timeout_ms,
        backoff_ms: 5,
        ..EndpointConfig::default()
    })
    .unwrap()
}

#[test]
fn echo_gold_returns_gold_answers() {
    let gold = HashMap::from([("which country?".to_string(), vec!["Germany".to_string()])]);
    let server = MockServer::start("127.0.0.1:0", MockMode::EchoGold(gold), 0, Failure::Status(500)).unwrap();
    let out = client(&server, 5_000).answer("q1", &bundle("which country?")).unwrap();
    assert_eq!(out.answers, vec!["Germany"]);
    assert!(!out.parse_failed);
    assert_eq!(out.retries, 0);
}

#[test]
fn missing_marker_flags_parse_failure() {
    let server = MockServer::start("127.0.0.1:0", MockMode::NoMarker, 0, Failure::Status(500)).unwrap();
    let out = client(&server, 5_000).answer("q", &bundle("x?")).unwrap();
    assert!(out.answers.is_empty());
    assert!(out.parse_failed);
}

#[test]
fn two_timeouts_then_success() {
    let server =
        MockServer::start("127.0.0.1:0", MockMode::Garbage, 2, Failure::Stall(Duration::from_millis(600))).unwrap();
    let c = client(&server, 200);
    let out = c.answer("q", &bundle("x?")).unwrap();
    assert_eq!(out.retries, 2);
    assert_eq!(c.retries(), 2);
    assert_eq!(out.answers.len(), 1);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = MockServer::start("127.0.0.1:0", MockMode::Garbage, 100, Failure::Status(503)).unwrap();
    let err = client(&server, 5_000).answer("q", &bundle("x?")).unwrap_err();
    assert!(matches!(err, GatewayError::Exhausted { attempts: 4, .. }), "{err}");
    assert_eq!(server.requests(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start("127.0.0.1:0", MockMode::Garbage, 100, Failure::Status(401)).unwrap();
    let err = client(&server, 5_000).answer("q", &bundle("x?")).unwrap_err();
    assert!(matches!(err, GatewayError::Http { status: 401, .. }), "{err}");
    assert_eq!(server.requests(), 1);
}

#[test]
fn concurrent_answers_keep_input_order() {
    let gold: HashMap<String, Vec<String>> = (0..12).map(|i| (format!("q{i}?"), vec![format!("a{i}")])).collect();
    let server = MockServer::start("127.0.0.1:0", MockMode::EchoGold(gold), 0, Failure::Status(500)).unwrap();
    let c = client(&server, 5_000);
    let items: Vec<_> = (0..12).map(|i| (format!("id{i}"), bundle(&format!("q{i}?")))).collect();
    let out = answer_all(&c, &items);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().answers, vec![format!("a{i}")]);
    }
    assert_eq!(server.requests(), 12);
}

#[test]
fn transcripts_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let t = Transcript { query_id: "q".into(), prompt: "p\nq".into(), response: "r".into(), answers: vec!["a".into()] };
    Transcript::write_jsonl(&[t.clone(), t], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["query_id", "prompt", "response", "answers"] {
        assert!(v.get(key).is_some());
    }
}

#[test]
fn missing_token_variable_is_a_config_error() {
    let cfg = EndpointConfig { token_env: Some("PARALLAX_TEST_UNSET_TOKEN_VAR".into()), ..EndpointConfig::default() };
    assert!(matches!(Client::new(cfg), Err(GatewayError::Config(_))));
}

#[test]
fn budget_drops_lowest_scored_triples() {
    let triples: Vec<[String; 3]> = (0..20).map(|i| [format!("e{i}"), "rel".into(), format!("f{i}")]).collect();
    let full = build_prompt("q?", &triples, &PromptTemplate::grounded(), Decoding::default(), None, false).unwrap();
    let budget = full.len() - 30;
    let cut = build_prompt("q?", &triples, &PromptTemplate::grounded(), Decoding::default(), Some(budget), false).unwrap();
    assert!(cut.len() <= budget);
    assert!(cut.truncated > 0);
    assert_eq!(cut.evidence_lines + cut.truncated, 20);
    assert!(cut.user.contains("(e0, rel, f0)"));
    assert!(!cut.user.contains("(e19, rel, f19)"));
}
