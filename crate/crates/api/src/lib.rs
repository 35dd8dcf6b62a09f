//! JSON wire types for the ramseg HTTP service, plus the run-length mask
//! encoding both ends use.

mod rle;

use std::collections::BTreeMap;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

pub use rle::{BinaryRle, LabelRle, RleError};

/// Response header carrying the index version a response was computed against.
pub const INDEX_VERSION_HEADER: &str = "x-index-version";

pub fn encode_base64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_base64(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    base64::engine::general_purpose::STANDARD.decode(text.trim())
}

/// An image sent to the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    /// A sample already in the database.
    SampleId { id: String },
    /// Encoded PNG (8/16-bit grey or colour) or `.npy` bytes.
    Encoded { data_base64: String },
    /// Row-major intensities.
    Raw { height: u32, width: u32, pixels: Vec<f32> },
}

impl ImagePayload {
    pub fn encoded(bytes: &[u8]) -> Self {
        Self::Encoded {
            data_base64: encode_base64(bytes),
        }
    }
}

/// A label mask sent to the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPayload {
    /// PNG (8/16-bit grey) or `.npy` integer labels.
    Encoded { data_base64: String },
    Labels { rle: LabelRle },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildIndexRequest {
    /// Dataset manifest path on the server host.
    #[serde(alias = "manifest")]
    pub manifest_path: String,
    /// Must name the backbone the server loaded, when given.
    #[serde(default)]
    pub backbone: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildIndexResponse {
    pub version: u64,
    pub count: usize,
    pub dim: usize,
    pub backbone: String,
    /// Journal entries from before the rebuild were archived here.
    pub archived_journal: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub image: ImagePayload,
    pub k: Option<usize>,
    /// `embedding` (default) or `random:<seed>`.
    pub strategy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    /// Squared L2 distance between unit embeddings; -1 for random picks.
    pub distance: f32,
    pub rank: usize,
    /// `GET` paths of the exemplar's display image and label mask.
    pub thumbnail_url: String,
    pub mask_url: String,
}

impl Hit {
    pub fn new(id: impl Into<String>, distance: f32, rank: usize) -> Self {
        let id = id.into();
        Self {
            thumbnail_url: format!("/api/samples/{id}/image"),
            mask_url: format!("/api/samples/{id}/mask"),
            id,
            distance,
            rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub hits: Vec<Hit>,
    pub index_version: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: ImagePayload,
    pub k: Option<usize>,
    /// Class names; empty means every class.
    #[serde(default)]
    pub classes: Vec<String>,
    pub strategy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMask {
    pub class_label: u16,
    pub class_name: String,
    pub rle: BinaryRle,
    pub score: f32,
    pub exemplar_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub embed_retrieve_ms: f64,
    pub memory_encode_ms: f64,
    pub attention_decode_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub height: u32,
    pub width: u32,
    pub masks: Vec<ClassMask>,
    /// All classes merged; overlaps go to the higher logit.
    pub label_map: LabelRle,
    /// Exemplars used, in retrieval order.
    pub exemplar_ids: Vec<String>,
    pub hits: Vec<Hit>,
    pub k_requested: usize,
    pub k_used: usize,
    pub strategy: String,
    pub timings_ms: Timing,
    pub index_version: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptRequest {
    /// Generated when absent.
    #[serde(alias = "id", default)]
    pub proposed_id: Option<String>,
    pub image: ImagePayload,
    pub mask: MaskPayload,
    #[serde(default)]
    pub subject_id: Option<String>,
    #[serde(default)]
    pub slice_index: Option<u32>,
    #[serde(default)]
    pub modality: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptResponse {
    pub id: String,
    pub index_version: u64,
    pub accepted_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub count: usize,
    pub dim: usize,
    pub version: u64,
    pub dataset_count: usize,
    pub accepted_count: usize,
    pub backbone: String,
    pub engine: String,
    pub class_map: BTreeMap<u16, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub engine: String,
    pub checkpoint_loaded: bool,
    pub backbone: String,
    pub backbone_pretrained: bool,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

/// One entry of `GET /api/samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    /// `dataset` or `user_accepted`.
    pub provenance: String,
    pub height: usize,
    pub width: usize,
}

/// Machine-readable error code; each maps to one HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    /// Malformed request body, bad base64, undecodable raster or RLE.
    BadRequest,
    InvalidK,
    InvalidId,
    UnknownClass,
    /// Image and mask (or payload) dimensions disagree.
    ShapeMismatch,
    NotFound,
    DuplicateId,
    EmptyIndex,
    PayloadTooLarge,
    /// Well-formed but unusable content (non-finite pixels, unknown labels).
    Unprocessable,
    CheckpointMissing,
    Busy,
    Internal,
}

impl ErrorCode {
    /// Wire spelling, e.g. `DUPLICATE_ID`.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BadRequest => "BAD_REQUEST",
            Self::InvalidK => "INVALID_K",
            Self::InvalidId => "INVALID_ID",
            Self::UnknownClass => "UNKNOWN_CLASS",
            Self::ShapeMismatch => "SHAPE_MISMATCH",
            Self::NotFound => "NOT_FOUND",
            Self::DuplicateId => "DUPLICATE_ID",
            Self::EmptyIndex => "EMPTY_INDEX",
            Self::PayloadTooLarge => "PAYLOAD_TOO_LARGE",
            Self::Unprocessable => "UNPROCESSABLE",
            Self::CheckpointMissing => "CHECKPOINT_MISSING",
            Self::Busy => "BUSY",
            Self::Internal => "INTERNAL",
        }
    }

    pub fn http_status(self) -> u16 {
        match self {
            Self::BadRequest | Self::InvalidK | Self::InvalidId | Self::UnknownClass | Self::ShapeMismatch => 400,
            Self::NotFound => 404,
            Self::DuplicateId | Self::EmptyIndex => 409,
            Self::PayloadTooLarge => 413,
            Self::Unprocessable => 422,
            Self::Busy => 503,
            Self::CheckpointMissing | Self::Internal => 500,
        }
    }
}

/// Error body of every non-2xx JSON response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{}: {message}", code.as_str())]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub http_status: u16,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            http_status: code.http_status(),
        }
    }

    pub fn http_status(&self) -> u16 {
        self.http_status
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_names_match_serde() {
        use ErrorCode::*;
        for code in [
            BadRequest, InvalidK, InvalidId, UnknownClass, ShapeMismatch, NotFound, DuplicateId, EmptyIndex,
            PayloadTooLarge, Unprocessable, CheckpointMissing, Busy, Internal,
        ] {
            assert_eq!(serde_json::to_value(code).unwrap(), code.as_str());
        }
        assert_eq!(ApiError::new(DuplicateId, "taken").to_string(), "DUPLICATE_ID: taken");
    }

    #[test]
    fn payload_tags() {
        let p = ImagePayload::SampleId { id: "s01_03".into() };
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"kind":"sample_id","id":"s01_03"}"#);
        let e = ImagePayload::encoded(&[1, 2, 3]);
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"kind":"encoded","data_base64":"AQID"}"#);
        let ImagePayload::Encoded { data_base64 } = serde_json::from_str(&json).unwrap() else {
            panic!("wrong variant")
        };
        assert_eq!(decode_base64(&data_base64).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn error_shape() {
        let e = ApiError::new(ErrorCode::DuplicateId, "id `a` exists");
        assert_eq!(e.http_status(), 409);
        assert_eq!(
            serde_json::to_value(&e).unwrap(),
            serde_json::json!({"code": "DUPLICATE_ID", "message": "id `a` exists", "http_status": 409})
        );
        assert_eq!(ErrorCode::Busy.http_status(), 503);
        assert_eq!(ErrorCode::EmptyIndex.http_status(), 409);
    }

    #[test]
    fn legacy_field_names_are_accepted() {
        let b: BuildIndexRequest = serde_json::from_str(r#"{"manifest": "m.json"}"#).unwrap();
        assert_eq!(b.manifest_path, "m.json");
        let a: AcceptRequest = serde_json::from_value(serde_json::json!({
            "id": "x",
            "image": {"kind": "sample_id", "id": "s"},
            "mask": {"kind": "encoded", "data_base64": ""}
        }))
        .unwrap();
        assert_eq!(a.proposed_id.as_deref(), Some("x"));
    }

    #[test]
    fn hits_link_their_artifacts() {
        let h = Hit::new("s1", 0.25, 1);
        assert_eq!(h.thumbnail_url, "/api/samples/s1/image");
        assert_eq!(h.mask_url, "/api/samples/s1/mask");
    }
}
