//! HTTP routes.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use inpaint_core::finetune::FinetuneConfig;
use serde::Serialize;

use crate::error::ServiceError;
use crate::records::{FinetuneStatus, JobRecord, JobRequest, SessionRecord};
use crate::state::{AppState, Upload};

type ApiResult<T> = Result<T, ServiceError>;

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload;
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/finetune", post(start_finetune))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/checkpoint", get(get_checkpoint))
        .route("/sessions/{id}/jobs", post(submit_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/artifacts/{n}", get(get_artifact))
        .route("/jobs/{id}/events", get(job_events))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Serialize)]
struct Created {
    id: String,
    status: FinetuneStatus,
    width: usize,
    height: usize,
    subject_token: Option<u32>,
}

async fn create_session(State(state): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<impl IntoResponse> {
    let (mut image, mut mask, mut exemplar) = (None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?
            .to_vec();
        match name.as_str() {
            "image" => image = Some(bytes),
            "mask" => mask = Some(bytes),
            "exemplar" => exemplar = Some(bytes),
            other => return Err(ServiceError::validation(other, "unexpected form field")),
        }
    }
    let up = Upload {
        image: image.ok_or_else(|| ServiceError::validation("image", "missing"))?,
        mask: mask.ok_or_else(|| ServiceError::validation("mask", "missing"))?,
        exemplar,
    };
    let rec = state.create_session(up).await?;
    Ok((
        StatusCode::CREATED,
        Json(Created {
            id: rec.id,
            status: rec.finetune.status,
            width: rec.width,
            height: rec.height,
            subject_token: rec.subject_token,
        }),
    ))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionRecord>> {
    let session = state.session(&id)?;
    let rec = session.record.lock().unwrap().clone();
    Ok(Json(rec))
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::validation("body", e.to_string()))
}

async fn start_finetune(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let cfg: FinetuneConfig = parse_json(&body)?;
    let rec = state.start_finetune(&id, cfg)?;
    Ok((StatusCode::ACCEPTED, Json(rec)))
}

fn ndjson(stream: impl futures::Stream<Item = Result<Bytes, std::convert::Infallible>> + Send + 'static) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response()
}

async fn session_events(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ndjson(state.session(&id)?.events.subscribe()))
}

async fn get_checkpoint(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = state.checkpoint_bytes(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn submit_job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: JobRequest = parse_json(&body)?;
    let rec = state.submit_job(&id, req)?;
    Ok((StatusCode::ACCEPTED, Json(rec)))
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    let job = state.job(&id)?;
    let rec = job.record.lock().unwrap().clone();
    Ok(Json(rec))
}

async fn get_artifact(
    State(state): State<Arc<AppState>>,
    Path((id, n)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let bytes = state.artifact(&id, n)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn job_events(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(ndjson(state.job(&id)?.events.subscribe()))
}
