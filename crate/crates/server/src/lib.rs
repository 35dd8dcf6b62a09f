//! HTTP/JSON service over the retrieval-augmented segmentation pipeline:
//! index building, retrieval, segmentation and accepted-annotation feedback.

pub mod config;
pub mod error;
mod handlers;
mod openapi;
pub mod state;

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::HeaderValue;
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use ramseg_api::INDEX_VERSION_HEADER;

pub use config::ServerConfig;
pub use error::AppError;
pub use state::AppState;

async fn index_version_header(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    let mut response = next.run(request).await;
    let headers = response.headers_mut();
    if !headers.contains_key(INDEX_VERSION_HEADER) {
        let version = state.index.snapshot().version();
        headers.insert(INDEX_VERSION_HEADER, HeaderValue::from(version));
    }
    response
}

pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = state.config.max_body_bytes;
    Router::new()
        .route("/api/index/build", post(handlers::build_index))
        .route("/api/index/stats", get(handlers::stats))
        .route("/api/retrieve", post(handlers::retrieve))
        .route("/api/segment", post(handlers::segment))
        .route("/api/annotations/accept", post(handlers::accept))
        .route("/api/samples", get(handlers::list_samples))
        .route("/api/samples/{id}/image", get(handlers::sample_image))
        .route("/api/samples/{id}/mask", get(handlers::sample_mask))
        .route("/api/health", get(handlers::health))
        .route("/api/spec", get(handlers::spec))
        .layer(middleware::from_fn_with_state(Arc::clone(&state), index_version_header))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    state: Arc<AppState>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr = listener.local_addr()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
