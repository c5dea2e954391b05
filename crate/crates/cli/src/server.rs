//! Read-only HTTP API over an [`Explorer`] snapshot.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use elm_core::error::ElmError;
use elm_core::service::{DecodeRequest, Explorer};
use serde_json::json;

pub fn router(explorer: Arc<Explorer>) -> Router {
    Router::new()
        .route("/api/entities", get(entities))
        .route("/api/cavs", get(cavs))
        .route("/api/tasks", get(tasks))
        .route("/api/decode", post(decode))
        .with_state(explorer)
}

pub async fn serve(explorer: Arc<Explorer>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(explorer)).await
}

fn error(status: StatusCode, msg: String) -> Response {
    (status, Json(json!({ "error": msg }))).into_response()
}

fn status_of(e: &ElmError) -> StatusCode {
    match e {
        ElmError::Data(_) => StatusCode::NOT_FOUND,
        ElmError::Config(_) | ElmError::Format(_) | ElmError::Degenerate(_) | ElmError::Json(_) => {
            StatusCode::BAD_REQUEST
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn entities(State(ex): State<Arc<Explorer>>) -> Response {
    Json(ex.entities()).into_response()
}

async fn cavs(State(ex): State<Arc<Explorer>>) -> Response {
    Json(ex.cav_list()).into_response()
}

async fn tasks(State(ex): State<Arc<Explorer>>) -> Response {
    Json(ex.tasks()).into_response()
}

async fn decode(State(ex): State<Arc<Explorer>>, body: Bytes) -> Response {
    let req: DecodeRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    match tokio::task::spawn_blocking(move || ex.decode(&req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error(status_of(&e), e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
