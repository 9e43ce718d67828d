//! JSON-over-HTTP front end for [`TaskService`].
//!
//! Every handler is a thin adapter: it decodes the request, calls one service
//! operation and encodes the result. Errors are returned as
//! `{"code": ..., "message": ...}` with a matching status.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sifter_core::config::JobConfig;
use sifter_core::pipeline::JobProgress;
use sifter_core::service::{PageResponse, PageSubmission, ServiceError, SessionCreated, SubmitAck, TaskService};
use sifter_core::{Execution, FilterVerdict};
use tokio::net::TcpListener;

#[derive(Clone)]
struct AppState {
    svc: Arc<TaskService>,
    exec: Execution,
}

/// Error body shared by every route.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::BAD_REQUEST,
            ServiceError::Pipeline(_) => StatusCode::CONFLICT,
            ServiceError::R1(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub worker_id: String,
    pub job_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

/// Body of `run-r1`. Empty body runs the filters over the job's corpus;
/// `kept` instead loads an R1 result produced elsewhere.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunR1Request {
    #[serde(default)]
    pub kept: Option<Vec<String>>,
    #[serde(default)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunR1Response {
    pub job_id: String,
    pub kept: usize,
    pub verdicts: Vec<FilterVerdict>,
}

/// Builds the router. `exec` controls how R1 runs triggered over HTTP use
/// the thread pool.
pub fn router(svc: Arc<TaskService>, exec: Execution) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/page", get(next_page))
        .route("/v1/sessions/{id}/page/{page_id}", post(submit_page))
        .route("/v1/jobs", post(submit_job))
        .route("/v1/jobs/{id}/status", get(job_status))
        .route("/v1/jobs/{id}/run-r1", post(run_r1))
        .with_state(AppState { svc, exec })
}

async fn create_session(
    State(st): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let Json(req) = body?;
    let created = st.svc.create_session(&req.worker_id, &req.job_id)?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_page(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<PageResponse> {
    Ok(Json(st.svc.next_page(&id)?))
}

async fn submit_page(
    State(st): State<AppState>,
    Path((id, page_id)): Path<(String, String)>,
    body: Result<Json<PageSubmission>, JsonRejection>,
) -> ApiResult<SubmitAck> {
    let Json(sub) = body?;
    Ok(Json(st.svc.submit_page(&id, &page_id, sub)?))
}

async fn submit_job(
    State(st): State<AppState>,
    body: Result<Json<JobConfig>, JsonRejection>,
) -> Result<(StatusCode, Json<JobCreated>), ApiError> {
    let Json(cfg) = body?;
    let job_id = st.svc.submit_job(cfg)?;
    Ok((StatusCode::CREATED, Json(JobCreated { job_id })))
}

async fn job_status(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<JobProgress> {
    Ok(Json(st.svc.job_status(&id)?))
}

async fn run_r1(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<RunR1Response> {
    let req: RunR1Request = if body.iter().all(u8::is_ascii_whitespace) {
        RunR1Request::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?
    };
    if let Some(kept) = req.kept {
        let n = kept.len();
        st.svc.load_r1_result(&id, kept)?;
        return Ok(Json(RunR1Response {
            job_id: id,
            kept: n,
            verdicts: Vec::new(),
        }));
    }
    let exec = if req.sequential { Execution::Sequential } else { st.exec };
    let svc = st.svc.clone();
    let job = id.clone();
    // frame decoding and pixel filters are CPU-bound
    let verdicts = tokio::task::spawn_blocking(move || svc.run_r1(&job, exec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(RunR1Response {
        job_id: id,
        kept: verdicts.iter().filter(|v| v.kept).count(),
        verdicts,
    }))
}

/// Serves on an already bound listener until ctrl-c.
pub async fn serve_on(listener: TcpListener, svc: Arc<TaskService>, exec: Execution) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "task service listening");
    axum::serve(listener, router(svc, exec))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub async fn serve(addr: SocketAddr, svc: Arc<TaskService>, exec: Execution) -> std::io::Result<()> {
    serve_on(TcpListener::bind(addr).await?, svc, exec).await
}
