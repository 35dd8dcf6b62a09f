//! Thin async client for the ramseg HTTP service.

use std::time::Duration;

use ramseg_api::{
    AcceptRequest, AcceptResponse, ApiError, BuildIndexRequest, BuildIndexResponse, HealthResponse, RetrieveRequest,
    RetrieveResponse, SampleSummary, SegmentRequest, SegmentResponse, StatsResponse,
};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use ramseg_api as api;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {error}")]
    Api { status: u16, error: ApiError },
    #[error("server returned {status} with an unreadable body: {body}")]
    Decode { status: u16, body: String },
}

impl ClientError {
    /// Status code of an error response, if the server answered.
    pub fn status(&self) -> Option<u16> {
        match self {
            Self::Http(e) => e.status().map(|s| s.as_u16()),
            Self::Api { status, .. } | Self::Decode { status, .. } => Some(*status),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// A PNG plus the entity tag it was served with.
#[derive(Debug, Clone, PartialEq)]
pub struct Png {
    pub bytes: Vec<u8>,
    pub etag: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RamsegClient {
    base: String,
    http: reqwest::Client,
}

impl RamsegClient {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let http = reqwest::Client::builder().timeout(Duration::from_secs(600)).build()?;
        Ok(Self::with_client(base, http))
    }

    pub fn with_client(base: impl Into<String>, http: reqwest::Client) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Self { base, http }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let mut req = self.http.request(method, self.url(path));
        if let Some(body) = body {
            req = req.json(body);
        }
        let resp = req.send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|_| ClientError::Decode {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).into_owned(),
            });
        }
        Err(error_from(status, &bytes))
    }

    pub async fn build_index(&self, manifest: impl Into<String>) -> Result<BuildIndexResponse> {
        let body = BuildIndexRequest {
            manifest_path: manifest.into(),
            backbone: None,
        };
        self.call(Method::POST, "/api/index/build", Some(&body)).await
    }

    pub async fn retrieve(&self, request: &RetrieveRequest) -> Result<RetrieveResponse> {
        self.call(Method::POST, "/api/retrieve", Some(request)).await
    }

    pub async fn segment(&self, request: &SegmentRequest) -> Result<SegmentResponse> {
        self.call(Method::POST, "/api/segment", Some(request)).await
    }

    pub async fn accept(&self, request: &AcceptRequest) -> Result<AcceptResponse> {
        self.call(Method::POST, "/api/annotations/accept", Some(request)).await
    }

    pub async fn stats(&self) -> Result<StatsResponse> {
        self.call::<(), _>(Method::GET, "/api/index/stats", None).await
    }

    pub async fn health(&self) -> Result<HealthResponse> {
        self.call::<(), _>(Method::GET, "/api/health", None).await
    }

    pub async fn spec(&self) -> Result<serde_json::Value> {
        self.call::<(), _>(Method::GET, "/api/spec", None).await
    }

    pub async fn samples(&self, offset: usize, limit: usize) -> Result<Vec<SampleSummary>> {
        let path = format!("/api/samples?offset={offset}&limit={limit}");
        self.call::<(), _>(Method::GET, &path, None).await
    }

    /// `None` when `if_none_match` still matches (304).
    pub async fn sample_image(&self, id: &str, if_none_match: Option<&str>) -> Result<Option<Png>> {
        self.png(&format!("/api/samples/{id}/image"), if_none_match).await
    }

    pub async fn sample_mask(&self, id: &str, if_none_match: Option<&str>) -> Result<Option<Png>> {
        self.png(&format!("/api/samples/{id}/mask"), if_none_match).await
    }

    async fn png(&self, path: &str, if_none_match: Option<&str>) -> Result<Option<Png>> {
        let mut req = self.http.get(self.url(path));
        if let Some(tag) = if_none_match {
            req = req.header(reqwest::header::IF_NONE_MATCH, tag);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status == StatusCode::NOT_MODIFIED {
            return Ok(None);
        }
        let etag = resp
            .headers()
            .get(reqwest::header::ETAG)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let bytes = resp.bytes().await?;
        if !status.is_success() {
            return Err(error_from(status, &bytes));
        }
        Ok(Some(Png { bytes: bytes.to_vec(), etag }))
    }
}

fn error_from(status: StatusCode, bytes: &[u8]) -> ClientError {
    match serde_json::from_slice::<ApiError>(bytes) {
        Ok(error) => ClientError::Api { status: status.as_u16(), error },
        Err(_) => ClientError::Decode {
            status: status.as_u16(),
            body: String::from_utf8_lossy(bytes).into_owned(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ramseg_api::ErrorCode;

    #[test]
    fn base_url_is_normalised() {
        let c = RamsegClient::new("http://localhost:1/").unwrap();
        assert_eq!(c.url("/api/health"), "http://localhost:1/api/health");
    }

    #[test]
    fn api_errors_are_decoded() {
        let body = br#"{"code":"DUPLICATE_ID","message":"dup","http_status":409}"#;
        match error_from(StatusCode::CONFLICT, body) {
            ClientError::Api { status, error } => {
                assert_eq!(status, 409);
                assert_eq!(error.code, ErrorCode::DuplicateId);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            error_from(StatusCode::BAD_GATEWAY, b"<html>"),
            ClientError::Decode { status: 502, .. }
        ));
    }

    #[tokio::test]
    async fn unreachable_server_is_a_transport_error() {
        let c = RamsegClient::new("http://127.0.0.1:9").unwrap();
        assert!(matches!(c.health().await, Err(ClientError::Http(_))));
    }
}
