//! HTTP/JSON API. Errors are `{code, message, field?}`. Starting a round
//! returns immediately; the round runs as a background job and is polled
//! through `GET /projects/{id}/rounds/{n}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::StudioError;
use crate::model::Verdict;
use crate::service::{CreateProject, StartRound, Studio};

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl IntoResponse for StudioError {
    fn into_response(self) -> Response {
        let status = match self.code() {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" | "wrong_state" => StatusCode::CONFLICT,
            "invalid" => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ApiError {
            code: self.code().to_string(),
            message: self.to_string(),
            field: self.field().map(str::to_string),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, StudioError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StudioError::Io(format!("worker panicked: {e}")))?
}

/// Parses a JSON body so malformed input gets the same error shape as
/// every other failure.
fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| StudioError::Invalid {
        field: None,
        message: format!("malformed request body: {e}"),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictBody {
    pub verdict: Verdict,
}

async fn create_project(State(s): State<Arc<Studio>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateProject = parse(&body)?;
    let p = blocking(move || s.create_project(&req)).await?;
    Ok((StatusCode::CREATED, Json(p)))
}

async fn list_projects(State(s): State<Arc<Studio>>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.list_projects()).await?))
}

async fn get_project(State(s): State<Arc<Studio>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.snapshot(&id)).await?))
}

async fn start_round(
    State(s): State<Arc<Studio>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: StartRound = if body.is_empty() { StartRound::default() } else { parse(&body)? };
    let s2 = s.clone();
    let id2 = id.clone();
    let r = blocking(move || s2.begin_round(&id2, &req)).await?;
    let n = r.index;
    tokio::task::spawn_blocking(move || {
        // Failures are persisted on the round itself.
        let _ = s.run_round(&id, n);
    });
    Ok((StatusCode::ACCEPTED, Json(r)))
}

async fn get_round(State(s): State<Arc<Studio>>, Path((id, n)): Path<(String, usize)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.round(&id, n)).await?))
}

async fn close_round(State(s): State<Arc<Studio>>, Path((id, n)): Path<(String, usize)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.close_round(&id, n)).await?))
}

async fn candidate_image(State(s): State<Arc<Studio>>, Path(cid): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let path = s.candidate_image_path(&cid)?;
        std::fs::read(&path).map_err(|e| StudioError::Io(format!("{}: {e}", path.display())))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response())
}

async fn verdict(
    State(s): State<Arc<Studio>>,
    Path(cid): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let body: VerdictBody = parse(&body)?;
    Ok(Json(blocking(move || s.review(&cid, body.verdict)).await?))
}

async fn metrics(State(s): State<Arc<Studio>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.metrics(&id)).await?))
}

pub fn router(studio: Arc<Studio>) -> Router {
    Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/rounds", post(start_round))
        .route("/projects/{id}/rounds/{n}", get(get_round))
        .route("/projects/{id}/rounds/{n}/close", post(close_round))
        .route("/projects/{id}/metrics", get(metrics))
        .route("/candidates/{cid}/image", get(candidate_image))
        .route("/candidates/{cid}/verdict", post(verdict))
        .with_state(studio)
}

/// Resumes interrupted rounds in the background, then serves until the
/// listener fails.
pub async fn serve(studio: Arc<Studio>, addr: SocketAddr) -> std::io::Result<()> {
    let s = studio.clone();
    tokio::task::spawn_blocking(move || {
        let _ = s.resume_all();
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(studio)).await
}
