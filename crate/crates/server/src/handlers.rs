use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use ndarray::Array2;
use ramseg_api::{
    decode_base64, AcceptRequest, AcceptResponse, BinaryRle, BuildIndexRequest, BuildIndexResponse, ClassMask,
    ErrorCode, HealthResponse, Hit, ImagePayload, LabelRle, MaskPayload, RetrieveRequest, RetrieveResponse,
    SampleSummary, SegmentRequest, SegmentResponse, StatsResponse, Timing,
};
use ramseg_core::data::{raster, ImageSlice, LabelMask, Provenance, SampleRecord};
use ramseg_core::index::RetrievalHit;
use ramseg_core::seg::{RetrievalStrategy, SampleStore, SegmentOptions};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use tokio::sync::OwnedSemaphorePermit;

use crate::error::AppError;
use crate::state::{validate_id, Acceptance, AppState};

type AppResult<T> = Result<T, AppError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> AppResult<T> {
    Ok(payload?.0)
}

fn permit(state: &AppState) -> AppResult<OwnedSemaphorePermit> {
    Arc::clone(&state.permits)
        .try_acquire_owned()
        .map_err(|_| AppError::new(ErrorCode::Busy, "server is at its inference limit; retry shortly"))
}

/// Runs CPU-heavy work off the async executor while holding an inference slot.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> AppResult<T>
where
    T: Send + 'static,
    F: FnOnce(Arc<AppState>) -> AppResult<T> + Send + 'static,
{
    let slot = permit(state)?;
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || {
        let _slot = slot;
        f(state)
    })
    .await?
}

fn resolve_image(state: &AppState, payload: &ImagePayload) -> AppResult<ImageSlice> {
    match payload {
        ImagePayload::SampleId { id } => state
            .store()
            .get(id)
            .map(|r| r.image.clone())
            .ok_or_else(|| AppError::not_found(format!("no sample `{id}`"))),
        ImagePayload::Encoded { data_base64 } => {
            let bytes = decode_base64(data_base64).map_err(|e| AppError::bad_request(format!("image base64: {e}")))?;
            Ok(ImageSlice::anonymous(raster::decode_image(&bytes)?)?)
        }
        ImagePayload::Raw { height, width, pixels } => {
            let px = Array2::from_shape_vec((*height as usize, *width as usize), pixels.clone())
                .map_err(|_| AppError::bad_request(format!("{} pixels for {height}×{width}", pixels.len())))?;
            Ok(ImageSlice::anonymous(px)?)
        }
    }
}

fn resolve_mask(payload: &MaskPayload) -> AppResult<Array2<u16>> {
    match payload {
        MaskPayload::Encoded { data_base64 } => {
            let bytes = decode_base64(data_base64).map_err(|e| AppError::bad_request(format!("mask base64: {e}")))?;
            Ok(raster::decode_mask(&bytes)?)
        }
        MaskPayload::Labels { rle } => {
            let labels = rle.decode()?;
            Ok(Array2::from_shape_vec((rle.height as usize, rle.width as usize), labels)
                .expect("decode checked coverage"))
        }
    }
}

fn parse_strategy(s: Option<&str>) -> AppResult<RetrievalStrategy> {
    s.map_or(Ok(RetrievalStrategy::Embedding), |s| s.parse().map_err(AppError::bad_request))
}

fn wire_hits(hits: &[RetrievalHit]) -> Vec<Hit> {
    hits.iter().map(|h| Hit::new(h.id.clone(), h.distance, h.rank)).collect()
}

fn to_u32(n: usize) -> u32 {
    u32::try_from(n).expect("image side fits in u32")
}

pub async fn build_index(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<BuildIndexRequest>, JsonRejection>,
) -> AppResult<Json<BuildIndexResponse>> {
    let req = body(payload)?;
    if let Some(name) = &req.backbone {
        let loaded = state.pipeline.backbone().name();
        if *name != state.config.backbone && name != loaded {
            return Err(AppError::bad_request(format!(
                "server runs backbone `{loaded}`; restart it to index with `{name}`"
            )));
        }
    }
    let _writer = state.writer.lock().await;
    let (version, count, archived) = blocking(&state, move |s| s.rebuild(&PathBuf::from(&req.manifest_path))).await?;
    tracing::info!(version, count, "index rebuilt");
    Ok(Json(BuildIndexResponse {
        version,
        count,
        dim: state.pipeline.backbone().dim(),
        backbone: state.pipeline.backbone().name().to_string(),
        archived_journal: archived.map(|p| p.display().to_string()),
    }))
}

pub async fn retrieve(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<RetrieveRequest>, JsonRejection>,
) -> AppResult<Json<RetrieveResponse>> {
    let req = body(payload)?;
    let strategy = parse_strategy(req.strategy.as_deref())?;
    let k = req.k.unwrap_or(state.config.default_k);
    let response = blocking(&state, move |s| {
        let image = resolve_image(&s, &req.image)?;
        let index = s.index.snapshot();
        let (hits, warnings) = s.pipeline.retrieve(&index, &image, k, strategy)?;
        Ok(RetrieveResponse {
            hits: wire_hits(&hits),
            index_version: index.version(),
            warnings,
        })
    })
    .await?;
    Ok(Json(response))
}

pub async fn segment(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<SegmentRequest>, JsonRejection>,
) -> AppResult<Json<SegmentResponse>> {
    let req = body(payload)?;
    let strategy = parse_strategy(req.strategy.as_deref())?;
    let k = req.k.unwrap_or(state.config.default_k);
    let response = blocking(&state, move |s| {
        let image = resolve_image(&s, &req.image)?;
        let index = s.index.snapshot();
        let store = s.store();
        let class_map = store.class_map();
        let classes = req
            .classes
            .iter()
            .map(|name| {
                class_map
                    .iter()
                    .find(|(_, n)| *n == name)
                    .map(|(&l, _)| l)
                    .ok_or_else(|| AppError::new(ErrorCode::UnknownClass, format!("unknown class `{name}`")))
            })
            .collect::<AppResult<Vec<u16>>>()?;
        let opts = SegmentOptions { k, classes, strategy };
        let result = s.pipeline.segment_image(&index, store.as_ref(), &image, &opts)?;
        let (h, w) = result.dims;
        let masks = result
            .class_masks
            .iter()
            .map(|(&label, mask)| {
                let flat: Vec<u8> = mask.iter().copied().collect();
                Ok(ClassMask {
                    class_label: label,
                    class_name: class_map.get(&label).cloned().unwrap_or_default(),
                    rle: BinaryRle::encode(to_u32(h), to_u32(w), &flat)?,
                    score: result.class_scores[&label],
                    exemplar_ids: result.exemplar_ids[&label].clone(),
                })
            })
            .collect::<AppResult<Vec<_>>>()?;
        let label_map: Vec<u16> = result.label_map().iter().copied().collect();
        Ok(SegmentResponse {
            height: to_u32(h),
            width: to_u32(w),
            masks,
            label_map: LabelRle::encode(to_u32(h), to_u32(w), &label_map)?,
            exemplar_ids: result.hits.iter().map(|h| h.id.clone()).collect(),
            hits: wire_hits(&result.hits),
            k_requested: result.k_requested,
            k_used: result.k_used,
            strategy: result.strategy.to_string(),
            timings_ms: Timing {
                embed_retrieve_ms: result.timing.embed_retrieve_ms,
                memory_encode_ms: result.timing.memory_encode_ms,
                attention_decode_ms: result.timing.attention_decode_ms,
                total_ms: result.timing.total_ms(),
            },
            index_version: index.version(),
            warnings: result.warnings,
        })
    })
    .await?;
    Ok(Json(response))
}

pub async fn accept(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<AcceptRequest>, JsonRejection>,
) -> AppResult<(StatusCode, Json<AcceptResponse>)> {
    let req = body(payload)?;
    let id = req.proposed_id.clone().unwrap_or_else(|| format!("acc_{}", uuid::Uuid::new_v4().simple()));
    validate_id(&id)?;
    // Decode and embed before taking the writer lock.
    let prepared_id = id.clone();
    let acceptance = blocking(&state, move |s| {
        let mut image = resolve_image(&s, &req.image)?;
        image.subject_id = req.subject_id.clone().unwrap_or_else(|| format!("accepted:{prepared_id}"));
        image.slice_index = req.slice_index.unwrap_or(0);
        if let Some(m) = &req.modality {
            image.modality = m.clone();
        }
        let mask = LabelMask::new(resolve_mask(&req.mask)?, s.class_map())?;
        let record = SampleRecord::new(prepared_id, image, mask, Provenance::UserAccepted)?;
        let embedding = s.pipeline.embed(&record.image)?;
        Ok(Acceptance { record, embedding })
    })
    .await?;
    let _writer = state.writer.lock().await;
    let version = {
        let state = Arc::clone(&state);
        tokio::task::spawn_blocking(move || state.accept(acceptance)).await??
    };
    tracing::info!(%id, version, "annotation accepted");
    Ok((
        StatusCode::CREATED,
        Json(AcceptResponse {
            id,
            index_version: version,
            accepted_count: state.accepted_count(),
        }),
    ))
}

pub async fn stats(State(state): State<Arc<AppState>>) -> Json<StatsResponse> {
    let index = state.index.snapshot();
    Json(StatsResponse {
        count: index.len(),
        dim: index.dim(),
        version: index.version(),
        dataset_count: state.dataset_count(),
        accepted_count: state.accepted_count(),
        backbone: state.pipeline.backbone().name().to_string(),
        engine: state.pipeline.engine().name(),
        class_map: state.class_map(),
    })
}

pub async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        engine: state.pipeline.engine().name(),
        checkpoint_loaded: state.pipeline.engine().checkpoint_loaded(),
        backbone: state.pipeline.backbone().name().to_string(),
        backbone_pretrained: state.pipeline.backbone().is_pretrained(),
        diagnostics: state.diagnostics.clone(),
    })
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

/// Sample ids in index order.
pub async fn list_samples(State(state): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> Json<Vec<SampleSummary>> {
    let index = state.index.snapshot();
    let store = state.store();
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(100).min(1000);
    Json(
        index
            .ids()
            .iter()
            .skip(offset)
            .take(limit)
            .filter_map(|id| store.get(id))
            .map(|r| SampleSummary {
                id: r.id.clone(),
                provenance: match r.provenance {
                    Provenance::Dataset => "dataset",
                    Provenance::UserAccepted => "user_accepted",
                }
                .to_string(),
                height: r.image.height(),
                width: r.image.width(),
            })
            .collect(),
    )
}

fn png_response(headers: &HeaderMap, bytes: Vec<u8>) -> Response {
    let etag = format!("\"{}\"", hex::encode(Sha256::digest(&bytes)));
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let etag_value = HeaderValue::from_str(&etag).expect("hex etag is a valid header");
    if matches {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value)]).into_response();
    }
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::ETAG, etag_value),
            (header::CACHE_CONTROL, HeaderValue::from_static("no-cache")),
        ],
        bytes,
    )
        .into_response()
}

/// 8-bit display rendering (min-max stretched).
pub async fn sample_image(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> AppResult<Response> {
    let record = state.store().get(&id).ok_or_else(|| AppError::not_found(format!("no sample `{id}`")))?;
    Ok(png_response(&headers, raster::encode_image_png8(record.image.pixels())))
}

/// Label PNG (8-bit when every label fits).
pub async fn sample_mask(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> AppResult<Response> {
    let record = state.store().get(&id).ok_or_else(|| AppError::not_found(format!("no sample `{id}`")))?;
    Ok(png_response(&headers, raster::encode_mask_png(record.mask.labels())))
}

pub async fn spec() -> Json<serde_json::Value> {
    Json(crate::openapi::document())
}
