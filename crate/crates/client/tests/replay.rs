use std::collections::VecDeque;
use std::sync::Mutex;

use probgate_client::{
    fetch_all, fetch_generation, parse_response, ClientConfig, ClientError, HttpResponse, Question, Transport,
};
use serde_json::Value;
use url::Url;

const COMPLETION: &str = include_str!("fixtures/completion.json");
const NO_LOGPROBS: &str = include_str!("fixtures/no_logprobs.json");

/// Replays a fixed script of responses and records what was sent.
struct Scripted {
    script: Mutex<VecDeque<Result<HttpResponse, String>>>,
    sent: Mutex<Vec<Value>>,
}

impl Scripted {
    fn new(script: Vec<Result<HttpResponse, String>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            sent: Mutex::new(Vec::new()),
        }
    }

    fn calls(&self) -> usize {
        self.sent.lock().unwrap().len()
    }
}

impl Transport for Scripted {
    fn post_json(&self, _url: &Url, _key: &str, body: &Value) -> Result<HttpResponse, String> {
        self.sent.lock().unwrap().push(body.clone());
        self.script.lock().unwrap().pop_front().expect("script exhausted")
    }
}

fn ok(body: &str) -> Result<HttpResponse, String> {
    Ok(HttpResponse { status: 200, body: body.into() })
}

fn status(code: u16) -> Result<HttpResponse, String> {
    Ok(HttpResponse { status: code, body: format!("{{\"error\":\"{code}\"}}") })
}

fn fast() -> ClientConfig {
    ClientConfig { backoff_base_ms: 0, ..Default::default() }
}

#[test]
fn replay_matches_fixture() {
    let record = parse_response("q1", "how many patients?", COMPLETION).unwrap();
    assert_eq!(record.id(), "q1");
    assert_eq!(record.sql(), "SELECT COUNT(*) FROM patients");
    let got: Vec<(&str, f64)> = record.tokens().iter().map(|t| (t.text(), t.logprob())).collect();
    assert_eq!(
        got,
        vec![("SELECT", -0.0001), (" COUNT", -0.02), ("(*)", -0.3), (" FROM", 0.0), (" patients", -1.25)]
    );
    let alts = record.tokens()[4].alternatives().unwrap();
    assert_eq!(alts[0].text, " admissions");
    assert_eq!(alts.len(), 2);
}

#[test]
fn parsing_is_pure() {
    let a = parse_response("q1", "x", COMPLETION).unwrap();
    let b = parse_response("q1", "x", COMPLETION).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_logprobs_names_field() {
    let err = parse_response("q1", "x", NO_LOGPROBS).unwrap_err();
    match &err {
        ClientError::Malformed { field, raw, .. } => {
            assert_eq!(field, "choices[0].logprobs");
            assert!(raw.contains("chatcmpl-9xk3"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("choices[0].logprobs"));
}

#[test]
fn missing_token_logprob_names_index() {
    let body = COMPLETION.replacen("\"logprob\": -0.3,", "", 1);
    let err = parse_response("q1", "x", &body).unwrap_err();
    assert!(err.to_string().contains("choices[0].logprobs.content[2].logprob"), "{err}");
}

#[test]
fn garbage_body_is_malformed() {
    assert!(matches!(parse_response("q1", "x", "<html>"), Err(ClientError::Malformed { .. })));
}

#[test]
fn two_transient_failures_then_success() {
    let t = Scripted::new(vec![status(503), status(502), ok(COMPLETION)]);
    let fetched = fetch_generation(&t, &fast(), "k", "q1", "how many patients?").unwrap();
    assert_eq!(fetched.retries, 2);
    assert_eq!(t.calls(), 3);
    assert_eq!(fetched.record.tokens().len(), 5);
}

#[test]
fn transport_errors_are_retried() {
    let t = Scripted::new(vec![Err("connection reset".into()), status(429), ok(COMPLETION)]);
    assert_eq!(fetch_generation(&t, &fast(), "k", "q1", "x").unwrap().retries, 2);
}

#[test]
fn retries_are_bounded() {
    let cfg = ClientConfig { max_retries: 2, ..fast() };
    let t = Scripted::new(vec![status(500), status(500), status(500), ok(COMPLETION)]);
    let err = fetch_generation(&t, &cfg, "k", "q1", "x").unwrap_err();
    assert!(matches!(err, ClientError::RetriesExhausted { attempts: 3, .. }), "{err:?}");
    assert_eq!(t.calls(), 3);
}

#[test]
fn auth_failure_is_fatal() {
    let t = Scripted::new(vec![status(401), ok(COMPLETION)]);
    let err = fetch_generation(&t, &fast(), "k", "q1", "x").unwrap_err();
    assert!(matches!(err, ClientError::Auth { status: 401, .. }));
    assert_eq!(t.calls(), 1);
}

#[test]
fn client_errors_are_not_retried() {
    let t = Scripted::new(vec![status(400), ok(COMPLETION)]);
    assert!(matches!(fetch_generation(&t, &fast(), "k", "q1", "x"), Err(ClientError::Http { status: 400, .. })));
    assert_eq!(t.calls(), 1);
}

#[test]
fn request_carries_prompt_and_question() {
    let t = Scripted::new(vec![ok(COMPLETION)]);
    fetch_generation(&t, &fast(), "k", "q1", "list wards").unwrap();
    let sent = t.sent.lock().unwrap();
    assert_eq!(sent[0]["messages"][1]["content"], "list wards");
    assert_eq!(sent[0]["messages"][0]["content"], probgate_client::SQLGPT_SYSTEM_PROMPT);
}

#[test]
fn fetch_all_keeps_input_order() {
    std::env::set_var("PROBGATE_TEST_KEY", "secret");
    let cfg = ClientConfig {
        api_key_env: "PROBGATE_TEST_KEY".into(),
        concurrency: 3,
        ..fast()
    };
    let questions: Vec<Question> =
        (0..6).map(|i| Question { id: format!("q{i}"), question: format!("question {i}") }).collect();
    let t = Scripted::new((0..6).map(|_| ok(COMPLETION)).collect());
    let fetched = fetch_all(&t, &cfg, &questions).unwrap();
    let ids: Vec<&str> = fetched.iter().map(|f| f.record.id()).collect();
    assert_eq!(ids, ["q0", "q1", "q2", "q3", "q4", "q5"]);
}

#[test]
fn missing_key_is_reported() {
    let cfg = ClientConfig { api_key_env: "PROBGATE_TEST_UNSET_KEY".into(), ..fast() };
    let t = Scripted::new(vec![]);
    let err = fetch_all(&t, &cfg, &[]).unwrap_err();
    assert!(err.to_string().contains("PROBGATE_TEST_UNSET_KEY"));
}
