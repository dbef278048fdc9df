use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use carefulsql_core::service::{AskRequest, Service, ServiceError};

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/ask", post(ask))
        .route("/api/models", get(models))
        .route("/api/health", get(health))
        .route("/api/transcripts/:id", get(transcript))
        .with_state(service)
}

pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn error_response(err: ServiceError) -> Response {
    let status = StatusCode::from_u16(err.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(err)).into_response()
}

fn internal(stage: &str, detail: impl ToString) -> Response {
    let body = json!({"error": "internal error", "stage": stage, "detail": detail.to_string()});
    (StatusCode::INTERNAL_SERVER_ERROR, Json(body)).into_response()
}

// Pipeline runs block on the database and the LLM endpoint.
async fn ask(State(service): State<Arc<Service>>, Json(request): Json<AskRequest>) -> Response {
    match tokio::task::spawn_blocking(move || service.handle_ask(&request)).await {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(err)) => error_response(err),
        Err(join) => internal("pipeline", join),
    }
}

async fn models(State(service): State<Arc<Service>>) -> Json<Vec<String>> {
    Json(service.list_models())
}

async fn health(State(service): State<Arc<Service>>) -> Response {
    match tokio::task::spawn_blocking(move || service.health()).await {
        Ok(health) => Json(health).into_response(),
        Err(join) => internal("health", join),
    }
}

async fn transcript(State(service): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    match service.transcripts.load(&id) {
        Some(value) => Json(value).into_response(),
        None => {
            let body = json!({"error": "transcript not found", "stage": "transcript", "detail": id});
            (StatusCode::NOT_FOUND, Json(body)).into_response()
        }
    }
}
