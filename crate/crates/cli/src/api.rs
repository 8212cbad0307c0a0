//! JSON API for the review interface.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dialogic_core::baseline::MOCK_BACKEND_ID;
use dialogic_core::coder::{FeedbackItem, RunFailure, RunStatus, SessionPolicy};
use dialogic_core::evaluation::{MatchMode, MetricsReport};
use dialogic_core::experiment::LineageEntry;
use dialogic_core::store::{LessonSummary, Store};
use dialogic_core::transcript::{Turn, DEFAULT_BATCH_SIZE};
use serde::{Deserialize, Serialize};

use crate::chat::ChatConfig;
use crate::ops::{self, OpError, ResultRow};

pub struct AppState {
    pub store: Store,
    /// Connection settings for `chat-http` runs, when the service has them.
    pub chat: Option<ChatConfig>,
}

pub struct ApiError(OpError);

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl From<OpError> for ApiError {
    fn from(e: OpError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(OpError::Invalid(e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            OpError::NotFound { .. } => StatusCode::NOT_FOUND,
            OpError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            OpError::Conflict { .. } => StatusCode::CONFLICT,
            OpError::Runtime(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.0.code().to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/lessons", get(list_lessons))
        .route("/api/lessons/{id}/turns", get(lesson_turns))
        .route("/api/runs", get(list_runs).post(start_run))
        .route("/api/runs/{id}", get(run_status))
        .route("/api/runs/{id}/results", get(run_results))
        .route("/api/runs/{id}/adjudications", post(add_adjudication))
        .route("/api/runs/{id}/feedback/compile", post(compile_feedback))
        .route("/api/runs/{id}/metrics", get(run_metrics))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn list_lessons(State(state): State<Arc<AppState>>) -> ApiResult<Vec<LessonSummary>> {
    Ok(Json(state.store.lessons().map_err(OpError::from)?))
}

#[derive(Debug, Deserialize)]
pub struct TurnRange {
    pub from: Option<u32>,
    pub to: Option<u32>,
}

async fn lesson_turns(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(range): Query<TurnRange>,
) -> ApiResult<Vec<Turn>> {
    let lesson = state.store.load_lesson(&id).map_err(OpError::from)?;
    let from = range.from.unwrap_or(0);
    let to = range.to.unwrap_or(u32::MAX);
    Ok(Json(
        lesson
            .turns
            .into_iter()
            .filter(|t| (from..=to).contains(&t.turn_id))
            .collect(),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartRun {
    pub lesson_id: String,
    pub config_hash: String,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub reset_between_batches: Option<bool>,
    #[serde(default)]
    pub verify_rules_first: Option<bool>,
    #[serde(default)]
    pub stability_probe: Option<bool>,
}

fn default_backend() -> String {
    MOCK_BACKEND_ID.to_string()
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunCreated {
    pub run_id: String,
}

/// Validates the request, creates the run and codes it in the background.
async fn start_run(
    State(state): State<Arc<AppState>>,
    body: Result<Json<StartRun>, JsonRejection>,
) -> Result<(StatusCode, Json<RunCreated>), ApiError> {
    let Json(req) = body?;
    let defaults = SessionPolicy::default();
    let policy = SessionPolicy {
        batch_size: req.batch_size,
        reset_between_batches: req
            .reset_between_batches
            .unwrap_or(defaults.reset_between_batches),
        verify_rules_first: req.verify_rules_first.unwrap_or(false),
        stability_probe: req.stability_probe.unwrap_or(defaults.stability_probe),
        self_check_suffix: defaults.self_check_suffix,
    };
    // The chat client blocks, so it is built and used off the async workers.
    let worker = state.clone();
    let run_id = tokio::task::spawn_blocking(move || -> Result<String, OpError> {
        let config = worker.store.load_config(&req.config_hash)?;
        worker.store.load_lesson(&req.lesson_id)?;
        let backend = ops::make_backend(&req.backend, &config.codebook, worker.chat.as_ref())?;
        let prepared = ops::prepare_run(&worker.store, &req.lesson_id, &req.config_hash, policy, None)?;
        let run_id = prepared.run_id.clone();
        std::thread::spawn(move || {
            if let Err(e) = ops::execute_run(&worker.store, &prepared, backend.as_ref()) {
                log::error!("run {}: {e}", prepared.run_id);
            }
        });
        Ok(run_id)
    })
    .await
    .map_err(|e| OpError::Runtime(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(RunCreated { run_id })))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub lesson_id: String,
    pub config_hash: String,
    pub backend_id: String,
    pub status: RunStatus,
    pub turn_count: usize,
    pub batch_count: usize,
    pub batches_done: usize,
    pub coded_turns: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<RunFailure>,
    pub warnings: Vec<String>,
    pub pending_adjudications: Vec<u32>,
    pub current_config_hash: String,
    pub lineage: Vec<LineageEntry>,
}

fn run_view(store: &Store, run_id: &str) -> Result<RunView, OpError> {
    let record = store.load_run(run_id)?;
    let config_hash = record
        .configs
        .first()
        .cloned()
        .unwrap_or_else(|| record.run.config_hash.clone());
    let current = if record.lineage.is_empty() {
        config_hash.clone()
    } else {
        record.current_config_hash().to_string()
    };
    Ok(RunView {
        run_id: run_id.to_string(),
        lesson_id: record.run.lesson_id.clone(),
        config_hash,
        backend_id: record.run.backend_id.clone(),
        status: record.run.status,
        turn_count: record.run.turn_count,
        batch_count: record.run.batch_count,
        batches_done: record.run.batches_done,
        coded_turns: record.run.codings.len(),
        failure: record.run.failure.clone(),
        warnings: record.run.warnings.clone(),
        pending_adjudications: record.pending.iter().copied().collect(),
        current_config_hash: current,
        lineage: record.lineage.entries,
    })
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Vec<RunView>> {
    let ids = state.store.runs().map_err(OpError::from)?;
    let views = ids
        .iter()
        .map(|id| run_view(&state.store, id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Json(views))
}

async fn run_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<RunView> {
    Ok(Json(run_view(&state.store, &id)?))
}

async fn run_results(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Vec<ResultRow>> {
    Ok(Json(ops::results(&state.store, &id)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdjudicationRequest {
    pub turn_id: u32,
    pub codes: Vec<String>,
    #[serde(default)]
    pub note: String,
}

async fn add_adjudication(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<AdjudicationRequest>, JsonRejection>,
) -> ApiResult<FeedbackItem> {
    let Json(req) = body?;
    Ok(Json(ops::adjudicate(&state.store, &id, req.turn_id, &req.codes, &req.note)?))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct CompileRequest {
    #[serde(default)]
    pub allow_agreements: bool,
}

async fn compile_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<CompileRequest>>,
) -> ApiResult<ops::CompiledFeedback> {
    let allow = body.map(|Json(b)| b.allow_agreements).unwrap_or(false);
    Ok(Json(ops::compile_feedback(&state.store, &id, allow)?))
}

#[derive(Debug, Deserialize)]
pub struct MetricsQuery {
    pub mode: Option<String>,
}

async fn run_metrics(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<MetricsQuery>,
) -> ApiResult<MetricsReport> {
    let mode = match q.mode.as_deref() {
        None | Some("") => MatchMode::Exact,
        Some(m) => m.parse().map_err(|e: String| OpError::Invalid(e))?,
    };
    Ok(Json(ops::evaluate(&state.store, &id, None, mode)?))
}
