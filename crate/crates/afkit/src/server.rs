//! The annotation service.
//!
//! All state sits behind one mutex, which makes claim and submit
//! linearizable. A response is appended to `responses.jsonl` and synced
//! before the queue records it and before the client gets its answer.
//! Metrics are computed on a snapshot taken under the lock.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use afkit_core::validation::{
    compute_metrics, AnnotationResponse, AnnotationTask, FieldError, Label, QueueError, TaskQueue, TaskStatus,
};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::io;

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
}

struct Inner {
    queue: TaskQueue,
    log: File,
    log_path: PathBuf,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    clock: Clock,
}

impl AppState {
    /// `log_path` is opened for appending; existing responses must already
    /// be replayed into `queue`.
    pub fn new(queue: TaskQueue, log_path: PathBuf, clock: Clock) -> crate::error::Result<Self> {
        let log = io::open_append(&log_path)?;
        Ok(Self { inner: Arc::new(Mutex::new(Inner { queue, log, log_path })), clock })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        // A panic mid-request cannot leave the queue half-updated: every
        // mutation is a single call after validation.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/claim", post(claim_task))
        .route("/api/tasks/{id}/response", post(submit_response))
        .route("/api/progress", get(progress))
        .route("/api/metrics", get(metrics))
        .with_state(state)
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    errors: Vec<FieldError>,
}

fn error_response(status: StatusCode, error: &'static str, message: String, errors: Vec<FieldError>) -> Response {
    (status, Json(ErrorBody { error, message, errors })).into_response()
}

fn queue_error(e: QueueError) -> Response {
    let msg = e.to_string();
    match e {
        QueueError::NotFound(_) => error_response(StatusCode::NOT_FOUND, "not_found", msg, vec![]),
        QueueError::Conflict(_) => error_response(StatusCode::CONFLICT, "conflict", msg, vec![]),
        QueueError::Closed(_) => error_response(StatusCode::CONFLICT, "closed", msg, vec![]),
        QueueError::NotClaimed(_) => error_response(StatusCode::CONFLICT, "not_claimed", msg, vec![]),
        QueueError::AlreadyAnswered(..) => error_response(StatusCode::CONFLICT, "already_answered", msg, vec![]),
        QueueError::Dequalified(_) => error_response(StatusCode::FORBIDDEN, "dequalified", msg, vec![]),
        QueueError::Invalid(errors) => error_response(StatusCode::UNPROCESSABLE_ENTITY, "invalid", msg, errors),
        QueueError::Duplicate(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg, vec![]),
    }
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

#[allow(clippy::result_large_err)]
fn annotator_of(q: AnnotatorQuery) -> Result<String, Response> {
    match q.annotator {
        Some(a) if !a.trim().is_empty() => Ok(a),
        _ => Err(error_response(
            StatusCode::BAD_REQUEST,
            "missing_annotator",
            "the annotator query parameter is required".into(),
            vec![FieldError { field: "annotator".into(), message: "required".into() }],
        )),
    }
}

async fn next_task(State(s): State<AppState>, Query(q): Query<AnnotatorQuery>) -> Response {
    let annotator = match annotator_of(q) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let now = (s.clock)();
    let result = s.lock().queue.claim_next(&annotator, now);
    match result {
        Ok(Some(view)) => Json(view).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => queue_error(e),
    }
}

async fn claim_task(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<AnnotatorQuery>) -> Response {
    let annotator = match annotator_of(q) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let now = (s.clock)();
    let result = s.lock().queue.claim(&id, &annotator, now);
    match result {
        Ok(view) => Json(view).into_response(),
        Err(e) => queue_error(e),
    }
}

/// Request body of a submission; the task id comes from the path and the
/// timestamp from the server.
#[derive(Debug, Deserialize)]
struct ResponseBody {
    #[serde(alias = "annotator")]
    annotator_id: String,
    labels: Vec<Label>,
    best: u32,
    second_best: u32,
}

fn body_errors(bytes: &[u8]) -> Result<ResponseBody, Vec<FieldError>> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| vec![FieldError { field: "body".into(), message: format!("not valid JSON: {e}") }])?;
    let Some(obj) = value.as_object() else {
        return Err(vec![FieldError { field: "body".into(), message: "expected a JSON object".into() }]);
    };
    let mut errs = Vec::new();
    let annotator = obj.get("annotator_id").or_else(|| obj.get("annotator"));
    if !annotator.is_some_and(|a| a.is_string()) {
        errs.push(FieldError { field: "annotator_id".into(), message: "required string".into() });
    }
    match obj.get("labels") {
        Some(serde_json::Value::Array(ls)) => {
            for (i, l) in ls.iter().enumerate() {
                if serde_json::from_value::<Label>(l.clone()).is_err() {
                    errs.push(FieldError {
                        field: format!("labels[{i}]"),
                        message: "must be likely, unlikely or gibberish".into(),
                    });
                }
            }
        }
        _ => errs.push(FieldError { field: "labels".into(), message: "required array".into() }),
    }
    for f in ["best", "second_best"] {
        if !obj.get(f).is_some_and(|v| v.as_u64().is_some_and(|x| x <= u32::MAX as u64)) {
            errs.push(FieldError { field: f.into(), message: "required ending_id".into() });
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    serde_json::from_value(value).map_err(|e| vec![FieldError { field: "body".into(), message: e.to_string() }])
}

async fn submit_response(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let body = match body_errors(&body) {
        Ok(b) => b,
        Err(errors) => {
            return error_response(StatusCode::UNPROCESSABLE_ENTITY, "invalid", "invalid response".into(), errors)
        }
    };
    let resp = AnnotationResponse {
        task_id: id,
        annotator_id: body.annotator_id,
        labels: body.labels,
        best: body.best,
        second_best: body.second_best,
        timestamp: (s.clock)(),
    };
    let mut inner = s.lock();
    if let Err(e) = inner.queue.check_submit(&resp) {
        return queue_error(e);
    }
    let Inner { log, log_path, queue } = &mut *inner;
    if let Err(e) = io::append_jsonl(log, log_path, &resp) {
        return error_response(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string(), vec![]);
    }
    let outcome = queue.record(resp);
    Json(json!({ "status": "accepted", "task": outcome })).into_response()
}

fn status_name(s: TaskStatus) -> &'static str {
    match s {
        TaskStatus::Open => "open",
        TaskStatus::Claimed => "claimed",
        TaskStatus::Done => "done",
        TaskStatus::Reannotate => "reannotate",
        TaskStatus::Rejected => "rejected",
    }
}

async fn progress(State(s): State<AppState>) -> Response {
    let counts = s.lock().queue.progress();
    let total: usize = counts.values().sum();
    let mut out: BTreeMap<&str, usize> = counts.into_iter().map(|(k, v)| (status_name(k), v)).collect();
    out.insert("total", total);
    Json(out).into_response()
}

async fn metrics(State(s): State<AppState>) -> Response {
    let snapshot: Vec<(AnnotationTask, Vec<AnnotationResponse>)> =
        s.lock().queue.entries().iter().map(|e| (e.task.clone(), e.responses.clone())).collect();
    let m = compute_metrics(snapshot.iter().map(|(t, r)| (t, r.as_slice())));
    Json(json!({
        "alpha": m.label_alpha,
        "ppa": m.label_ppa,
        "annotators": m.annotators,
        "detail": m,
    }))
    .into_response()
}

/// Binds and serves until ctrl-c.
pub async fn serve(state: AppState, bind: &str) -> crate::error::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| crate::error::Error::Config(format!("cannot bind {bind}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| crate::error::Error::Internal(e.to_string()))?;
    eprintln!("serve: listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| crate::error::Error::Internal(e.to_string()))
}
