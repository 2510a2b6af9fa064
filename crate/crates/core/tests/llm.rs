mod common;

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use chrono::{TimeZone, Utc};
use klnx::corpus::{CodePair, Label};
use klnx::detector::{DetectorAdapter, RemoteDetector, StubDetector};
use klnx::kln::{sample_neighborhood, KlnSize};
use klnx::llm::{
    canonical_json, complete, load_record, prompt_digest, record_path, response_path, save_record, ChatBackend,
    ExplanationRecord, LlmConfig, LlmError, MockBackend, MockScript, OpenAiBackend, RecordError, ScriptedFailure,
    SyntheticExplainer, TemperatureMode,
};
use klnx::prompt::{build_prompt, render, PromptTemplate};
use klnx::validate::{validate_record, MatchMode};
use serde_json::{json, Value};

use common::kln_corpus;

#[derive(Clone, Default)]
struct ServerState {
    /// Status codes to answer with, in order; 200 once exhausted.
    statuses: Arc<Mutex<VecDeque<u16>>>,
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<String>>>,
}

async fn chat(
    State(state): State<ServerState>,
    headers: axum::http::HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    state.bodies.lock().unwrap().push(body);
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
    state.auth.lock().unwrap().push(auth);
    let status = state.statuses.lock().unwrap().pop_front().unwrap_or(200);
    let payload = match status {
        200 => json!({"choices": [{"message": {"role": "assistant", "content": "They are a clone."}}]}),
        _ => json!({"error": {"message": format!("status {status}")}}),
    };
    (StatusCode::from_u16(status).unwrap(), Json(payload))
}

async fn detect(Json(body): Json<Value>) -> Json<Value> {
    let same = body["code_a"].as_str().unwrap().lines().next() == body["code_b"].as_str().unwrap().lines().next();
    Json(json!({"label": if same { "clone" } else { "non-clone" }, "confidence": 0.75}))
}

/// Serves the mock endpoints on an ephemeral port from a background runtime.
fn spawn_server(state: ServerState) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/v1/chat/completions", post(chat))
                .route("/detect", post(detect))
                .with_state(state);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn config(addr: SocketAddr, mode: TemperatureMode) -> LlmConfig {
    LlmConfig {
        endpoint: format!("http://{addr}/v1/chat/completions"),
        temperature_mode: mode,
        backoff_ms: 1,
        timeout: Duration::from_secs(5),
        ..LlmConfig::default()
    }
}

#[test]
fn openai_backend_sends_temperature_only_in_zero_mode() {
    let state = ServerState::default();
    let addr = spawn_server(state.clone());
    for mode in [TemperatureMode::Default, TemperatureMode::Zero] {
        let cfg = config(addr, mode);
        let backend = OpenAiBackend::new(&cfg, "sk-test".into()).unwrap();
        assert_eq!(complete("hello", &cfg, &backend).unwrap(), "They are a clone.");
    }
    let bodies = state.bodies.lock().unwrap();
    assert!(bodies[0].get("temperature").is_none());
    assert_eq!(bodies[1]["temperature"], json!(0.0));
    assert_eq!(bodies[1]["messages"][0]["content"], "hello");
    assert_eq!(bodies[1]["model"], "gpt-4");
    assert!(state.auth.lock().unwrap().iter().all(|a| a == "Bearer sk-test"));
}

#[test]
fn transient_errors_are_retried() {
    let state = ServerState::default();
    state.statuses.lock().unwrap().extend([429, 503]);
    let addr = spawn_server(state.clone());
    let cfg = config(addr, TemperatureMode::Zero);
    let backend = OpenAiBackend::new(&cfg, "k".into()).unwrap();
    assert!(complete("p", &cfg, &backend).is_ok());
    assert_eq!(state.bodies.lock().unwrap().len(), 3);
}

#[test]
fn retries_stop_at_the_limit() {
    let state = ServerState::default();
    state.statuses.lock().unwrap().extend([500, 500, 500, 500, 500]);
    let addr = spawn_server(state.clone());
    let cfg = LlmConfig {
        max_retries: 2,
        ..config(addr, TemperatureMode::Zero)
    };
    let backend = OpenAiBackend::new(&cfg, "k".into()).unwrap();
    assert!(matches!(complete("p", &cfg, &backend), Err(LlmError::Server { status: 500, .. })));
    assert_eq!(state.bodies.lock().unwrap().len(), 3);
}

#[test]
fn auth_errors_are_not_retried() {
    let state = ServerState::default();
    state.statuses.lock().unwrap().extend([401]);
    let addr = spawn_server(state.clone());
    let cfg = config(addr, TemperatureMode::Default);
    let backend = OpenAiBackend::new(&cfg, "bad".into()).unwrap();
    assert!(matches!(complete("p", &cfg, &backend), Err(LlmError::Auth(_))));
    assert_eq!(state.bodies.lock().unwrap().len(), 1);
}

#[test]
fn missing_credential_is_reported_by_name() {
    let cfg = LlmConfig {
        credential_env: "KLNX_TEST_CREDENTIAL_THAT_IS_NOT_SET".into(),
        ..LlmConfig::default()
    };
    match OpenAiBackend::from_env(&cfg) {
        Err(LlmError::MissingCredential(name)) => assert_eq!(name, "KLNX_TEST_CREDENTIAL_THAT_IS_NOT_SET"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn oversized_prompt_is_rejected_before_sending() {
    let mock = MockBackend::echo("x");
    let cfg = LlmConfig {
        token_budget: 10,
        ..LlmConfig::default()
    };
    let err = complete(&"a".repeat(400), &cfg, &mock).unwrap_err();
    assert!(matches!(err, LlmError::ContextLength { estimated: 100, budget: 10 }));
    assert_eq!(mock.calls(), 0);
}

#[test]
fn remote_detector_round_trip() {
    let addr = spawn_server(ServerState::default());
    let corpus = kln_corpus();
    let remote = RemoteDetector::new(format!("http://{addr}/detect"), Duration::from_secs(5), 2).unwrap();
    let adapter = DetectorAdapter::Remote(remote);
    let x = corpus.snippet("brattleship/p003.java").unwrap().key();
    let y = corpus.snippet("pancake_flip/p003.java").unwrap().key();
    let p = adapter.predict(&CodePair::new(x, y).unwrap(), &corpus).unwrap();
    assert_eq!(p.confidence, 0.75);
    assert!(matches!(p.label, Label::Clone | Label::NonClone));

    let dead = RemoteDetector::new("http://127.0.0.1:9/detect", Duration::from_millis(200), 1).unwrap();
    let x = corpus.snippet("brattleship/p003.java").unwrap().key();
    let y = corpus.snippet("brattleship/p010.java").unwrap().key();
    assert!(DetectorAdapter::Remote(dead).predict(&CodePair::new(x, y).unwrap(), &corpus).is_err());
}

#[test]
fn mock_resolution_order() {
    let mut responses = std::collections::BTreeMap::new();
    responses.insert(prompt_digest("scripted"), "from script".to_string());
    let mock = MockBackend::new(MockScript {
        failures: vec![ScriptedFailure::RateLimit],
        responses,
        synthetic: None,
        default: Some("fallback".into()),
    });
    let cfg = LlmConfig {
        backoff_ms: 0,
        ..LlmConfig::default()
    };
    assert_eq!(complete("scripted", &cfg, &mock).unwrap(), "from script");
    assert_eq!(mock.calls(), 2);
    assert_eq!(complete("other", &cfg, &mock).unwrap(), "fallback");
}

fn sample_record(response: Option<String>) -> (ExplanationRecord, klnx::corpus::Corpus) {
    let corpus = kln_corpus();
    let adapter = DetectorAdapter::Stub(StubDetector::echo());
    let x = corpus.snippet("counting_sheep/p003.java").unwrap().key();
    let y = corpus.snippet("counting_sheep/p010.java").unwrap().key();
    let target = CodePair::new(x, y).unwrap();
    let set = sample_neighborhood(&corpus, &target, KlnSize::Four, 4, &adapter).unwrap();
    let prediction = adapter.predict(&target, &corpus).unwrap();
    let prompt = render(&build_prompt(&set, &prediction, &PromptTemplate::default(), &corpus).unwrap());
    let raw_response = response.unwrap_or_else(|| {
        let mock = MockBackend::synthetic(SyntheticExplainer::default());
        complete(&prompt, &LlmConfig::default(), &mock).unwrap()
    });
    let record = ExplanationRecord {
        record_id: "CP1-4-zero-1".into(),
        pair_key: target.key(),
        size: KlnSize::Four,
        temperature_mode: TemperatureMode::Zero,
        run_index: 1,
        seed: 4,
        target_prediction: prediction,
        class_balance: set.class_balance(),
        neighborhood: set,
        prompt_text: prompt,
        raw_response,
        model_name: "mock".into(),
        started_at: Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap(),
        finished_at: Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 3).unwrap(),
    };
    (record, corpus)
}

#[test]
fn synthetic_mock_output_validates() {
    let (record, corpus) = sample_record(None);
    let v = validate_record(&record, &record.target_prediction, &corpus, MatchMode::Normalized).unwrap();
    assert!(v.verdict_correct);
    assert!(v.all_lines_correct, "{}", record.raw_response);
}

#[test]
fn records_round_trip_and_keep_markdown_alongside() {
    let (record, _) = sample_record(Some("## Why\nIt is a clone.".into()));
    let dir = tempfile::tempdir().unwrap();
    let path = save_record(&record, dir.path()).unwrap();
    assert_eq!(path, record_path(dir.path(), &record.record_id));
    assert_eq!(load_record(&path).unwrap(), record);
    let md = std::fs::read_to_string(response_path(dir.path(), &record.record_id)).unwrap();
    assert_eq!(md, record.raw_response);

    let mut later = record.clone();
    later.started_at = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
    later.finished_at = later.started_at;
    assert_eq!(canonical_json(&later), canonical_json(&record));
}

#[test]
fn corrupted_record_is_a_schema_error() {
    let (record, _) = sample_record(Some("clone".into()));
    let dir = tempfile::tempdir().unwrap();
    let path = save_record(&record, dir.path()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"raw_response\"", "\"raw_reply\"")).unwrap();
    assert!(matches!(load_record(&path), Err(RecordError::Schema { .. })));
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_record(&path), Err(RecordError::Schema { .. })));
    assert!(matches!(load_record(dir.path().join("missing.json")), Err(RecordError::Io { .. })));
}

#[test]
fn debug_output_hides_the_key() {
    let backend = OpenAiBackend::new(&LlmConfig::default(), "sk-secret".into()).unwrap();
    assert!(!format!("{backend:?}").contains("sk-secret"));
    let _: &dyn ChatBackend = &backend;
}
