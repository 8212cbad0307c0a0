use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::http::{HeaderMap, StatusCode as AxumStatus};
use axum::routing::post;
use axum::{Json, Router};
use dialogic_cli::api::{router, AppState, ErrorBody, RunCreated, RunView};
use dialogic_cli::chat::ChatConfig;
use dialogic_cli::ops::{self, CompiledFeedback, ResultRow};
use dialogic_core::baseline::KeywordBackend;
use dialogic_core::codebook::builtin_cdas;
use dialogic_core::coder::{RunStatus, SessionPolicy};
use dialogic_core::evaluation::MetricsReport;
use dialogic_core::prompt::presets::cdas_config;
use dialogic_core::store::Store;
use dialogic_core::synthetic::synthetic_lesson;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn spawn(app: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

struct Service {
    _dir: tempfile::TempDir,
    base: String,
    client: Client,
    config_hash: String,
    state: Arc<AppState>,
}

impl Service {
    fn start(turns: usize, chat: Option<ChatConfig>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("data")).unwrap();
        let (lesson, gold) = synthetic_lesson("lesson-a", turns, 5);
        store.import_lesson(&lesson, Some(&gold)).unwrap();
        let config_hash = store.save_config(&cdas_config()).unwrap();
        let state = Arc::new(AppState { store, chat });
        let base = spawn(router(state.clone()));
        Service {
            _dir: dir,
            base,
            client: Client::new(),
            config_hash,
            state,
        }
    }

    fn get(&self, path: &str) -> reqwest::blocking::Response {
        self.client.get(format!("{}{path}", self.base)).send().unwrap()
    }

    fn post(&self, path: &str, body: Value) -> reqwest::blocking::Response {
        self.client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .unwrap()
    }

    fn start_run(&self, body: Value) -> String {
        let resp = self.post("/api/runs", body);
        assert_eq!(resp.status(), StatusCode::CREATED);
        resp.json::<RunCreated>().unwrap().run_id
    }

    fn wait(&self, run_id: &str) -> RunView {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let view: RunView = self.get(&format!("/api/runs/{run_id}")).json().unwrap();
            if matches!(view.status, RunStatus::Complete | RunStatus::Failed) {
                return view;
            }
            assert!(Instant::now() < deadline, "run {run_id} did not finish");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn mock_run(&self) -> String {
        let id = self.start_run(json!({"lesson_id": "lesson-a", "config_hash": self.config_hash}));
        assert_eq!(self.wait(&id).status, RunStatus::Complete);
        id
    }
}

fn error(resp: reqwest::blocking::Response, status: StatusCode) -> String {
    assert_eq!(resp.status(), status);
    resp.json::<ErrorBody>().unwrap().error
}

#[test]
fn lists_lessons_turns_and_runs() {
    let svc = Service::start(40, None);
    let runs: Vec<Value> = svc.get("/api/runs").json().unwrap();
    assert!(runs.is_empty());
    let lessons: Vec<Value> = svc.get("/api/lessons").json().unwrap();
    assert_eq!(lessons.len(), 1);
    assert_eq!(lessons[0]["lesson_id"], "lesson-a");
    assert_eq!(lessons[0]["turn_count"], 40);
    assert_eq!(lessons[0]["has_gold"], true);
    let turns: Vec<Value> = svc.get("/api/lessons/lesson-a/turns?from=3&to=5").json().unwrap();
    let ids: Vec<u64> = turns.iter().map(|t| t["turn_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![3, 4, 5]);
    assert_eq!(
        error(svc.get("/api/lessons/missing/turns"), StatusCode::NOT_FOUND),
        "unknown_lesson"
    );
}

#[test]
fn start_run_validates_requests() {
    let svc = Service::start(10, None);
    let cases = [
        (json!({"lesson_id": "nope", "config_hash": svc.config_hash}), StatusCode::NOT_FOUND, "unknown_lesson"),
        (json!({"lesson_id": "lesson-a", "config_hash": "00ff"}), StatusCode::NOT_FOUND, "unknown_config"),
        (
            json!({"lesson_id": "lesson-a", "config_hash": svc.config_hash, "batch_size": 0}),
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
        ),
        (
            json!({"lesson_id": "lesson-a", "config_hash": svc.config_hash, "backend": "oracle"}),
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
        ),
        (
            json!({"lesson_id": "lesson-a", "config_hash": svc.config_hash, "backend": "chat-http"}),
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
        ),
        (json!({"config_hash": svc.config_hash}), StatusCode::UNPROCESSABLE_ENTITY, "validation"),
    ];
    for (body, status, code) in cases {
        assert_eq!(error(svc.post("/api/runs", body.clone()), status), code, "{body}");
    }
    let runs: Vec<Value> = svc.get("/api/runs").json().unwrap();
    assert!(runs.is_empty(), "rejected requests must not create runs");
    assert_eq!(error(svc.get("/api/runs/ghost"), StatusCode::NOT_FOUND), "unknown_run");
}

#[test]
fn run_results_and_metrics() {
    let svc = Service::start(60, None);
    let run_id = svc.mock_run();
    let view: RunView = svc.get(&format!("/api/runs/{run_id}")).json().unwrap();
    assert_eq!(view.turn_count, 60);
    assert_eq!(view.batch_count, 3);
    assert_eq!(view.batches_done, 3);
    assert_eq!(view.coded_turns, 60);
    assert_eq!(view.config_hash, svc.config_hash);
    assert_eq!(view.current_config_hash, svc.config_hash);

    let rows: Vec<ResultRow> = svc.get(&format!("/api/runs/{run_id}/results")).json().unwrap();
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r.predicted_codes.is_some() && r.gold_codes.is_some()));

    let exact: MetricsReport = svc.get(&format!("/api/runs/{run_id}/metrics")).json().unwrap();
    let overlap: MetricsReport = svc
        .get(&format!("/api/runs/{run_id}/metrics?mode=overlap"))
        .json()
        .unwrap();
    assert_eq!(exact.per_code.len(), 13);
    assert_eq!(exact.turn_count, 60);
    assert!(overlap.turn_precision >= exact.turn_precision);
    let agree = rows.iter().filter(|r| r.gold_codes == r.predicted_codes).count();
    assert!((exact.turn_precision - agree as f64 / 60.0).abs() < 1e-12);
    assert_eq!(
        error(svc.get(&format!("/api/runs/{run_id}/metrics?mode=fuzzy")), StatusCode::UNPROCESSABLE_ENTITY),
        "validation"
    );
}

#[test]
fn incomplete_runs_conflict() {
    let svc = Service::start(10, None);
    let prepared = ops::prepare_run(
        &svc.state.store,
        "lesson-a",
        &svc.config_hash,
        SessionPolicy::default(),
        Some("held".into()),
    )
    .unwrap();
    let view: RunView = svc.get("/api/runs/held").json().unwrap();
    assert_eq!(view.status, RunStatus::Pending);
    assert_eq!(error(svc.get("/api/runs/held/metrics"), StatusCode::CONFLICT), "run_not_complete");
    assert_eq!(
        error(
            svc.post("/api/runs/held/adjudications", json!({"turn_id": 1, "codes": ["A"]})),
            StatusCode::CONFLICT
        ),
        "run_not_complete"
    );
    assert_eq!(
        error(svc.post("/api/runs/held/feedback/compile", json!({})), StatusCode::CONFLICT),
        "run_not_complete"
    );
    ops::execute_run(&svc.state.store, &prepared, &KeywordBackend::for_codebook(&builtin_cdas()).unwrap())
        .unwrap();
    assert_eq!(svc.get("/api/runs/held/metrics").status(), StatusCode::OK);
}

#[test]
fn adjudication_and_feedback_cycle() {
    let svc = Service::start(60, None);
    let run_id = svc.mock_run();
    let rows: Vec<ResultRow> = svc.get(&format!("/api/runs/{run_id}/results")).json().unwrap();
    let wrong = rows
        .iter()
        .find(|r| r.gold_codes != r.predicted_codes)
        .expect("mock disagrees with gold somewhere");
    let gold: Vec<String> = wrong.gold_codes.clone().unwrap().into_iter().collect();

    let path = format!("/api/runs/{run_id}/adjudications");
    assert_eq!(
        error(svc.post(&path, json!({"turn_id": 9999, "codes": ["A"]})), StatusCode::NOT_FOUND),
        "unknown_turn"
    );
    assert_eq!(
        error(svc.post(&path, json!({"turn_id": wrong.turn_id, "codes": ["ZZ"]})), StatusCode::UNPROCESSABLE_ENTITY),
        "validation"
    );
    assert_eq!(
        error(svc.post(&path, json!({"turn_id": wrong.turn_id})), StatusCode::UNPROCESSABLE_ENTITY),
        "validation"
    );
    let resp = svc.post(&path, json!({"turn_id": wrong.turn_id, "codes": gold, "note": "checked"}));
    assert_eq!(resp.status(), StatusCode::OK);

    // The next read sees the write.
    let rows: Vec<ResultRow> = svc.get(&format!("/api/runs/{run_id}/results")).json().unwrap();
    let row = rows.iter().find(|r| r.turn_id == wrong.turn_id).unwrap();
    assert_eq!(row.adjudicated_codes, wrong.gold_codes);
    assert_eq!(row.adjudication_note.as_deref(), Some("checked"));
    let view: RunView = svc.get(&format!("/api/runs/{run_id}")).json().unwrap();
    assert_eq!(view.pending_adjudications, vec![wrong.turn_id]);

    let compile = format!("/api/runs/{run_id}/feedback/compile");
    let resp = svc.client.post(format!("{}{compile}", svc.base)).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let compiled: CompiledFeedback = resp.json().unwrap();
    assert_eq!(compiled.old_config_hash, svc.config_hash);
    assert_ne!(compiled.new_config_hash, svc.config_hash);
    assert_eq!(compiled.cycle, 0);
    assert_eq!(compiled.added_examples, 1);

    let view: RunView = svc.get(&format!("/api/runs/{run_id}")).json().unwrap();
    assert_eq!(view.current_config_hash, compiled.new_config_hash);
    assert_eq!(view.lineage.len(), 1);
    assert!(view.pending_adjudications.is_empty());
    assert_eq!(
        error(svc.post(&compile, json!({})), StatusCode::UNPROCESSABLE_ENTITY),
        "validation"
    );

    // The refined config is immediately usable.
    let next = svc.start_run(json!({"lesson_id": "lesson-a", "config_hash": compiled.new_config_hash}));
    assert_eq!(svc.wait(&next).status, RunStatus::Complete);
}

#[test]
fn agreement_adjudications_need_opt_in() {
    let svc = Service::start(60, None);
    let run_id = svc.mock_run();
    let rows: Vec<ResultRow> = svc.get(&format!("/api/runs/{run_id}/results")).json().unwrap();
    let right = rows
        .iter()
        .find(|r| r.gold_codes == r.predicted_codes)
        .expect("mock agrees with gold somewhere");
    let codes: Vec<String> = right.predicted_codes.clone().unwrap().into_iter().collect();
    let resp = svc.post(
        &format!("/api/runs/{run_id}/adjudications"),
        json!({"turn_id": right.turn_id, "codes": codes}),
    );
    assert_eq!(resp.status(), StatusCode::OK);
    let compile = format!("/api/runs/{run_id}/feedback/compile");
    assert_eq!(
        error(svc.post(&compile, json!({})), StatusCode::UNPROCESSABLE_ENTITY),
        "validation"
    );
    let resp = svc.post(&compile, json!({"allow_agreements": true}));
    assert_eq!(resp.status(), StatusCode::OK);
}

async fn fake_chat(headers: HeaderMap, Json(body): Json<Value>) -> Result<Json<Value>, AxumStatus> {
    let expected = format!("Bearer {}", std::env::var("DIALOGIC_API_TEST_KEY").unwrap());
    if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(expected.as_str()) {
        return Err(AxumStatus::UNAUTHORIZED);
    }
    let last = body["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .ok_or(AxumStatus::BAD_REQUEST)?
        .to_string();
    let reply = KeywordBackend::for_codebook(&builtin_cdas()).unwrap().reply(&last);
    Ok(Json(json!({"choices": [{"message": {"role": "assistant", "content": reply}}]})))
}

#[test]
fn chat_http_backend_matches_mock() {
    std::env::set_var("DIALOGIC_API_TEST_KEY", "sekret");
    std::env::set_var("DIALOGIC_API_WRONG_KEY", "guess");
    let chat_base = spawn(Router::new().route("/v1/chat/completions", post(fake_chat)));
    let chat = ChatConfig {
        endpoint: format!("{chat_base}/v1/chat/completions"),
        model: "fake".into(),
        credential_env: "DIALOGIC_API_TEST_KEY".into(),
    };
    let svc = Service::start(45, Some(chat.clone()));
    let mock = svc.mock_run();
    let remote = svc.start_run(json!({
        "lesson_id": "lesson-a",
        "config_hash": svc.config_hash,
        "backend": "chat-http",
        "verify_rules_first": true,
    }));
    let view = svc.wait(&remote);
    assert_eq!(view.status, RunStatus::Complete, "{:?}", view.failure);
    assert_eq!(view.backend_id, "chat-http");
    let a: Vec<ResultRow> = svc.get(&format!("/api/runs/{mock}/results")).json().unwrap();
    let b: Vec<ResultRow> = svc.get(&format!("/api/runs/{remote}/results")).json().unwrap();
    let codes = |rows: &[ResultRow]| rows.iter().map(|r| r.predicted_codes.clone()).collect::<Vec<_>>();
    assert_eq!(codes(&a), codes(&b));

    let denied = Service::start(
        5,
        Some(ChatConfig {
            credential_env: "DIALOGIC_API_WRONG_KEY".into(),
            ..chat
        }),
    );
    let run = denied.start_run(json!({
        "lesson_id": "lesson-a",
        "config_hash": denied.config_hash,
        "backend": "chat-http",
    }));
    let view = denied.wait(&run);
    assert_eq!(view.status, RunStatus::Failed);
    assert!(view.failure.is_some());
}
