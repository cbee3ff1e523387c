//! JSON over HTTP for the console.
//!
//! | Method | Path | Body / query |
//! |---|---|---|
//! | POST | `/runs` | [`CreateRun`] |
//! | GET | `/runs` | |
//! | GET | `/runs/{id}` | |
//! | GET | `/runs/{id}/events` | `?from=seq`, server-sent events |
//! | POST | `/runs/{id}/decision` | [`DecisionRequest`] |
//! | GET | `/runs/{id}/iterations/{i}/files/{name}` | |
//!
//! Errors are `{"error": code, "message": text}`.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedforge_core::orchestrator::{DecisionRequest, Orchestrator, OrchestratorError, RunEvent, RunSettings};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const FOLLOW_POLL: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    pub query_id: String,
    #[serde(default)]
    pub t_max: Option<u32>,
    #[serde(default)]
    pub n_rounds: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Transcript directory on the server for an offline run.
    #[serde(default)]
    pub scripted: Option<PathBuf>,
    #[serde(default)]
    pub advisory_evaluator: Option<bool>,
}

impl CreateRun {
    pub fn settings(&self) -> RunSettings {
        let mut s = match &self.scripted {
            Some(dir) => RunSettings::scripted(dir),
            None => RunSettings::default(),
        };
        if let Some(v) = self.t_max {
            s.t_max = v;
        }
        if let Some(v) = self.n_rounds {
            s.n_rounds = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.advisory_evaluator {
            s.advisory_evaluator = v;
        }
        s
    }
}

#[derive(Debug, Deserialize)]
pub struct FromSeq {
    #[serde(default)]
    pub from: Option<u64>,
}

pub struct ApiError(StatusCode, &'static str, String);

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let (status, code) = match &e {
            OrchestratorError::UnknownQuery(_) => (StatusCode::BAD_REQUEST, "unknown-query"),
            OrchestratorError::UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown-run"),
            OrchestratorError::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
            OrchestratorError::InvalidDecision(_) => (StatusCode::CONFLICT, "invalid-decision"),
            OrchestratorError::Integrity(_) | OrchestratorError::Replay(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "integrity")
            }
            OrchestratorError::Halted(_) | OrchestratorError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, OrchestratorError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(orch: Arc<Orchestrator>) -> Router {
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/:id", get(get_run))
        .route("/runs/:id/events", get(events))
        .route("/runs/:id/decision", post(decide))
        .route("/runs/:id/iterations/:i/files/:name", get(iteration_file))
        .with_state(orch)
}

async fn create_run(
    State(orch): State<Arc<Orchestrator>>,
    Json(body): Json<CreateRun>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let o = orch.clone();
    let (id, snap) = blocking(move || {
        let id = o.start_run(&body.query_id, body.settings())?;
        let snap = o.snapshot(&id)?;
        o.spawn_drive(&id)?;
        Ok((id, snap))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({"run_id": id, "run": snap}))))
}

async fn list_runs(State(orch): State<Arc<Orchestrator>>) -> ApiResult<Json<serde_json::Value>> {
    let ids = blocking(move || Ok(orch.store().list()?)).await?;
    Ok(Json(json!({"runs": ids})))
}

async fn get_run(State(orch): State<Arc<Orchestrator>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let snap = blocking(move || orch.snapshot(&id)).await?;
    Ok(Json(snap))
}

async fn decide(
    State(orch): State<Arc<Orchestrator>>,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    let out = blocking(move || {
        let out = orch.decide(&id, req)?;
        orch.spawn_drive(&id)?;
        if let Some(child) = &out.new_run_id {
            orch.spawn_drive(child)?;
        }
        Ok(out)
    })
    .await?;
    Ok(Json(json!({"run": out.snapshot, "new_run_id": out.new_run_id})))
}

async fn iteration_file(
    State(orch): State<Arc<Orchestrator>>,
    Path((id, i, name)): Path<(String, u32, String)>,
) -> ApiResult<impl IntoResponse> {
    let ctype = if name.ends_with(".json") || name.ends_with(".jsonl") {
        "application/json"
    } else {
        "text/plain; charset=utf-8"
    };
    let body = blocking(move || orch.iteration_file(&id, i, &name)).await?;
    Ok(([(header::CONTENT_TYPE, ctype)], body))
}

struct Follow {
    orch: Arc<Orchestrator>,
    id: String,
    next: u64,
    pending: VecDeque<RunEvent>,
    done: bool,
}

/// Every event with seq >= from, then live ones. The stream ends once the
/// run is terminal and fully delivered. Delivery is at least once: a
/// reconnecting consumer sends `from` (or Last-Event-ID) and dedupes by seq.
async fn events(
    State(orch): State<Arc<Orchestrator>>,
    Path(id): Path<String>,
    Query(q): Query<FromSeq>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let after_last = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|s| s + 1);
    let from = q.from.unwrap_or(1).max(after_last.unwrap_or(1)).max(1);
    let o = orch.clone();
    let check = id.clone();
    blocking(move || o.snapshot(&check).map(|_| ())).await?;
    let state = Follow { orch, id, next: from, pending: VecDeque::new(), done: false };
    let stream = futures::stream::unfold(state, |mut st| async move {
        loop {
            if let Some(ev) = st.pending.pop_front() {
                let data = serde_json::to_string(&ev).expect("event serializes");
                let sse = Event::default().id(ev.seq.to_string()).event(ev.kind.clone()).data(data);
                return Some((Ok(sse), st));
            }
            if st.done {
                return None;
            }
            let (o, id, next) = (st.orch.clone(), st.id.clone(), st.next);
            let polled = tokio::task::spawn_blocking(move || {
                let batch = o.wait_events(&id, next, FOLLOW_POLL)?;
                let snap = o.snapshot(&id)?;
                Ok::<_, OrchestratorError>((batch, snap))
            })
            .await;
            let Ok(Ok((batch, snap))) = polled else { return None };
            if let Some(last) = batch.last() {
                st.next = last.seq + 1;
            }
            st.pending.extend(batch);
            st.done = snap.phase.is_terminal() && st.next > snap.last_seq;
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
