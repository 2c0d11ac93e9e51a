use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use super::{SessionManager, API_VERSION};
use crate::error::Error;

#[derive(Debug, Deserialize)]
struct StepRequest {
    instruction: String,
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Busy(_) => StatusCode::CONFLICT,
            Error::Contract(_) | Error::Parse { .. } | Error::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = serde_json::json!({ "version": API_VERSION, "error": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

type Shared = Arc<SessionManager>;

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> crate::error::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Contract(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn create(State(m): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    let view = blocking(move || m.create()).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn step(
    State(m): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<StepRequest>,
) -> Result<impl IntoResponse, ApiError> {
    let r = blocking(move || m.step(&id, &req.instruction)).await?;
    Ok(Json(r))
}

async fn fetch(State(m): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(m.get(&id)?))
}

async fn delete(State(m): State<Shared>, Path(id): Path<String>) -> StatusCode {
    m.delete(&id);
    StatusCode::NO_CONTENT
}

async fn image(State(m): State<Shared>, Path(r): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let bytes = m.image(&r)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

async fn healthz() -> impl IntoResponse {
    Json(serde_json::json!({ "version": API_VERSION, "status": "ok" }))
}

async fn model_info(State(m): State<Shared>) -> impl IntoResponse {
    Json(m.info())
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(fetch).delete(delete))
        .route("/sessions/{id}/steps", post(step))
        .route("/images/{image_ref}", get(image))
        .route("/healthz", get(healthz))
        .route("/model", get(model_info))
        .with_state(manager)
}

pub async fn serve(manager: Arc<SessionManager>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(manager)).await
}
