//! HTTP session service: upload an image, mask and optional exemplar,
//! finetune a per-session checkpoint, then run guided inpainting jobs and
//! stream their progress.
//!
//! Routes:
//!
//! * `POST /sessions` (multipart `image`, `mask`, optional `exemplar`)
//! * `GET /sessions/{id}`, `GET /sessions/{id}/events`, `GET /sessions/{id}/checkpoint`
//! * `POST /sessions/{id}/finetune` (JSON finetune config, `{}` for defaults)
//! * `POST /sessions/{id}/jobs` (JSON job request)
//! * `GET /jobs/{id}`, `GET /jobs/{id}/artifacts/{n}`, `GET /jobs/{id}/events`
//!
//! Event streams are newline-delimited JSON and end when the work finishes.

pub mod api;
pub mod config;
pub mod error;
pub mod events;
pub mod records;
pub mod state;
pub mod store;

use std::sync::Arc;

pub use api::router;
pub use config::ServiceConfig;
pub use error::ServiceError;
pub use state::AppState;

/// Serves the API on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
