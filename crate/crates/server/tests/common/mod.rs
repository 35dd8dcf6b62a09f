#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::response::Response;
use ramseg_api::ImagePayload;
use ramseg_core::data::synth::{shapes_slice, write_shapes_corpus};
use ramseg_core::data::{IntensityMode, PreprocessSpec};
use ramseg_server::{router, AppState, ServerConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;

pub const SIZE: usize = 40;

pub fn config(samples_dir: &Path) -> ServerConfig {
    ServerConfig {
        samples_dir: samples_dir.to_path_buf(),
        engine: "transfer".into(),
        backbone: "test:0".into(),
        default_k: 3,
        preprocess: PreprocessSpec::new(28, 64, IntensityMode::Minmax).unwrap(),
        ..Default::default()
    }
}

/// Corpus under `root/corpus`, state under `root/state`.
pub struct Fixture {
    pub root: tempfile::TempDir,
    pub manifest: PathBuf,
}

impl Fixture {
    pub fn new(n: usize) -> Self {
        let root = tempfile::tempdir().unwrap();
        let manifest = write_shapes_corpus(&root.path().join("corpus"), "ds", n, SIZE, 5, 4).unwrap();
        Self { root, manifest }
    }

    pub fn state_dir(&self) -> PathBuf {
        self.root.path().join("state")
    }

    pub fn open(&self) -> Arc<AppState> {
        AppState::open(config(&self.state_dir())).unwrap()
    }

    pub fn open_with(&self, f: impl FnOnce(&mut ServerConfig)) -> Arc<AppState> {
        let mut c = config(&self.state_dir());
        f(&mut c);
        AppState::open(c).unwrap()
    }
}

/// A slice that is not in the corpus.
pub fn fresh_image(seed: u64) -> (ImagePayload, ndarray::Array2<u16>) {
    let (pixels, labels) = shapes_slice(SIZE, 90_000 + seed);
    let payload = ImagePayload::Raw {
        height: SIZE as u32,
        width: SIZE as u32,
        pixels: pixels.iter().copied().collect(),
    };
    (payload, labels)
}

pub async fn send(state: &Arc<AppState>, request: Request<Body>) -> Response {
    router(Arc::clone(state)).oneshot(request).await.unwrap()
}

pub async fn post<B: Serialize>(state: &Arc<AppState>, path: &str, body: &B) -> Response {
    let request = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    send(state, request).await
}

pub async fn get(state: &Arc<AppState>, path: &str) -> Response {
    send(state, Request::get(path).body(Body::empty()).unwrap()).await
}

pub async fn bytes(response: Response) -> Vec<u8> {
    axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap().to_vec()
}

pub async fn json<T: DeserializeOwned>(response: Response, expected: StatusCode) -> T {
    let status = response.status();
    let body = bytes(response).await;
    assert_eq!(status, expected, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}
