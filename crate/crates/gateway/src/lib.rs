//! Review API over a runs directory, plus the worker that advances runs.
//!
//! The API and the worker share nothing in memory: decisions are persisted by the
//! API and picked up by the worker on its next poll.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use equicrew_core::hitl::{list_pending, CheckpointState, HitlError, ReviewDecision, Verdict};
use equicrew_core::pipeline::types::{CrewReport, Stage};
use equicrew_core::run::{Engine, PipelineError, RunState, RunStatus};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub token: Arc<str>,
}

/// Error body: `{"error": <message>, "code": <kind>}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "code": self.code}))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            PipelineError::RunNotFound(_) => (S::NOT_FOUND, "run_not_found"),
            PipelineError::InvalidState { .. } => (S::CONFLICT, "invalid_state"),
            PipelineError::Hitl(h) => match h {
                HitlError::NotFound(_) => (S::NOT_FOUND, "checkpoint_not_found"),
                HitlError::CheckpointNotPending { .. } => (S::CONFLICT, "checkpoint_not_pending"),
                HitlError::DuplicatePendingCheckpoint { .. } => (S::CONFLICT, "duplicate_pending_checkpoint"),
                HitlError::EditValidationFailed(_) => (S::UNPROCESSABLE_ENTITY, "edit_validation_failed"),
                HitlError::MissingEditedReport | HitlError::UnexpectedEditedReport => {
                    (S::UNPROCESSABLE_ENTITY, "bad_decision")
                }
                HitlError::Io(_) => (S::INTERNAL_SERVER_ERROR, "io"),
            },
            _ => (S::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, PipelineError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub as_of: String,
    pub current_stage: Option<Stage>,
    pub pending_checkpoint: Option<String>,
    pub updated_at: String,
}

fn summary(engine: &Engine, s: &RunState) -> RunSummary {
    let pending = s
        .current_stage()
        .and_then(|st| s.stages.get(&st))
        .and_then(|st| st.checkpoint_id.clone())
        .filter(|_| s.status == RunStatus::AwaitingReview)
        .filter(|id| engine.workspace.checkpoint(id).is_ok_and(|c| c.state == CheckpointState::Pending));
    RunSummary {
        run_id: s.run_id.clone(),
        status: s.status,
        as_of: s.as_of.to_string(),
        current_stage: s.current_stage(),
        pending_checkpoint: pending,
        updated_at: s.updated_at.to_rfc3339(),
    }
}

async fn list_runs(State(app): State<AppState>) -> ApiResult<Vec<RunSummary>> {
    let engine = app.engine.clone();
    let runs = blocking(move || Ok(engine.workspace.list()?.iter().map(|s| summary(&engine, s)).collect())).await?;
    Ok(Json(runs))
}

async fn run_detail(State(app): State<AppState>, Path(run_id): Path<String>) -> ApiResult<Value> {
    let engine = app.engine.clone();
    blocking(move || {
        let state = engine.workspace.state(&run_id)?;
        let checkpoints = engine.workspace.checkpoints(&run_id).list()?;
        let cps: Vec<Value> = checkpoints
            .iter()
            .map(|c| {
                json!({"checkpoint_id": c.checkpoint_id, "stage": c.stage, "attempt": c.attempt,
                       "state": c.state, "decided_by": c.decided_by})
            })
            .collect();
        let mut v = serde_json::to_value(&state).map_err(|e| PipelineError::Io(e.into()))?;
        v["checkpoints"] = Value::Array(cps);
        v["usage"] = serde_json::to_value(engine.usage(&run_id)?).map_err(|e| PipelineError::Io(e.into()))?;
        Ok(Json(v))
    })
    .await
}

#[derive(Deserialize)]
struct CheckpointQuery {
    state: Option<String>,
    run_id: Option<String>,
}

async fn checkpoints(State(app): State<AppState>, Query(q): Query<CheckpointQuery>) -> ApiResult<Value> {
    let engine = app.engine.clone();
    blocking(move || {
        let list = match q.state.as_deref() {
            Some("pending") => list_pending(&engine.workspace.root, q.run_id.as_deref())?,
            _ => {
                let mut all = Vec::new();
                for run in engine.workspace.list()? {
                    if q.run_id.as_ref().is_none_or(|r| *r == run.run_id) {
                        all.extend(engine.workspace.checkpoints(&run.run_id).list()?);
                    }
                }
                if let Some(s) = &q.state {
                    all.retain(|c| serde_json::to_value(c.state).is_ok_and(|v| v == s.as_str()));
                }
                all.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| b.checkpoint_id.cmp(&a.checkpoint_id)));
                all
            }
        };
        Ok(Json(serde_json::to_value(list).map_err(|e| PipelineError::Io(e.into()))?))
    })
    .await
}

async fn checkpoint(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let engine = app.engine.clone();
    blocking(move || {
        let cp = engine.workspace.checkpoint(&id)?;
        Ok(Json(serde_json::to_value(cp).map_err(|e| PipelineError::Io(e.into()))?))
    })
    .await
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBody {
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_report: Option<CrewReport>,
    #[serde(default)]
    pub note: String,
    pub reviewer: String,
}

async fn decide(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Value> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_request", e.body_text()))?;
    if body.reviewer.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_request", "reviewer is required"));
    }
    let engine = app.engine.clone();
    blocking(move || {
        let cp = engine.decide(&ReviewDecision {
            checkpoint_id: id,
            verdict: body.verdict,
            edited_report: body.edited_report,
            note: body.note,
            reviewer: body.reviewer,
        })?;
        Ok(Json(serde_json::to_value(cp).map_err(|e| PipelineError::Io(e.into()))?))
    })
    .await
}

async fn allocation(State(app): State<AppState>, Path(run_id): Path<String>) -> ApiResult<Value> {
    let engine = app.engine.clone();
    let alloc = blocking(move || engine.workspace.published_allocation(&run_id)).await?;
    match alloc {
        Some(a) => Ok(Json(serde_json::to_value(a).expect("serializable"))),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_published", "allocation not published yet")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PublishBody {
    reviewer: String,
}

async fn publish(
    State(app): State<AppState>,
    Path(run_id): Path<String>,
    body: Result<Json<PublishBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<RunSummary> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_request", e.body_text()))?;
    let engine = app.engine.clone();
    blocking(move || {
        let state = engine.publish(&run_id, &body.reviewer)?;
        Ok(Json(summary(&engine, &state)))
    })
    .await
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    let ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == &*app.token);
    if ok {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response()
    }
}

/// `/api/...` behind the bearer token; static files, when given, at `/`.
pub fn router(app: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{run_id}", get(run_detail))
        .route("/runs/{run_id}/allocation", get(allocation))
        .route("/runs/{run_id}/publish", post(publish))
        .route("/checkpoints", get(checkpoints))
        .route("/checkpoints/{id}", get(checkpoint))
        .route("/checkpoints/{id}/decision", post(decide))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(app);
    let router = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

/// Polls persisted run state and advances every run that can make progress.
pub struct Worker {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    pub fn spawn(engine: Arc<Engine>, interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("equicrew-worker".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    poll_once(&engine);
                    std::thread::sleep(interval);
                }
            })
            .expect("spawn worker thread");
        Self {
            stop,
            handle: Some(handle),
        }
    }

    /// Stops after the run currently being advanced, if any.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// One pass over the runs directory.
pub fn poll_once(engine: &Engine) {
    let runs = match engine.workspace.list() {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!("cannot list runs: {e}");
            return;
        }
    };
    for run in runs {
        let active = match run.status {
            RunStatus::Created | RunStatus::Running | RunStatus::AwaitingReview => true,
            RunStatus::AwaitingPublish => run.auto_approve,
            RunStatus::Completed | RunStatus::Failed => false,
        };
        if !active {
            continue;
        }
        match engine.advance(&run.run_id) {
            Ok(s) if s.status != run.status || s.current_stage() != run.current_stage() => {
                tracing::info!(run = %run.run_id, status = ?s.status, stage = ?s.current_stage(), "advanced");
            }
            Ok(_) => {}
            Err(e) => tracing::warn!(run = %run.run_id, "{e}"),
        }
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
