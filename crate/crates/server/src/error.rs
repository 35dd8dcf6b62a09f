use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ramseg_api::{ApiError, ErrorCode, RleError};
use ramseg_core::data::DataError;
use ramseg_core::embedding::EmbedError;
use ramseg_core::index::IndexError;
use ramseg_core::seg::SegError;

/// Handler error; renders as `{code, message}` with the code's HTTP status.
#[derive(Debug)]
pub struct AppError(pub ApiError);

impl AppError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self(ApiError::new(code, message))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn code(&self) -> ErrorCode {
        self.0.code
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for AppError {}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(code = ?self.0.code, "{}", self.0.message);
        }
        (status, Json(self.0)).into_response()
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::MissingFile(_) => ErrorCode::NotFound,
            DataError::DuplicateId(_) => ErrorCode::DuplicateId,
            DataError::ShapeMismatch(_) => ErrorCode::ShapeMismatch,
            DataError::UnknownLabel { .. } | DataError::NonFiniteInput(_) => ErrorCode::Unprocessable,
            DataError::SchemaViolation(_) | DataError::InvalidSpec(_) | DataError::UnsupportedRaster(_) => {
                ErrorCode::BadRequest
            }
            DataError::Io { .. } => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl From<IndexError> for AppError {
    fn from(e: IndexError) -> Self {
        let code = match &e {
            IndexError::DuplicateId(_) => ErrorCode::DuplicateId,
            IndexError::EmptyIndex => ErrorCode::EmptyIndex,
            IndexError::InvalidK { .. } => ErrorCode::InvalidK,
            IndexError::DimMismatch { .. } | IndexError::NotNormalized { .. } => ErrorCode::Unprocessable,
            IndexError::CorruptFile(_) | IndexError::VersionUnsupported(_) | IndexError::Io(_) => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl From<EmbedError> for AppError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Preprocess(d) => d.into(),
            EmbedError::ShapeMismatch { .. } => Self::new(ErrorCode::ShapeMismatch, e.to_string()),
            other => Self::new(ErrorCode::Internal, other.to_string()),
        }
    }
}

impl From<SegError> for AppError {
    fn from(e: SegError) -> Self {
        let code = match e {
            SegError::Data(d) => return d.into(),
            SegError::Embed(d) => return d.into(),
            SegError::Index(d) => return d.into(),
            SegError::AtSlice { source, .. } => return (*source).into(),
            SegError::EmptyIndex => ErrorCode::EmptyIndex,
            SegError::ShapeMismatch(_) => ErrorCode::ShapeMismatch,
            SegError::NonBinaryMask(_) | SegError::EmptyMemoryBank => ErrorCode::Unprocessable,
            SegError::UnknownClass(_) => ErrorCode::UnknownClass,
            SegError::InvalidK(_) => ErrorCode::InvalidK,
            SegError::UnknownEngine(_) => ErrorCode::BadRequest,
            SegError::MissingSample(_) => ErrorCode::NotFound,
            SegError::CheckpointMissing { .. } => ErrorCode::CheckpointMissing,
            SegError::BankRejected(_) | SegError::Runtime(_) => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl From<RleError> for AppError {
    fn from(e: RleError) -> Self {
        Self::new(ErrorCode::BadRequest, format!("bad run-length mask: {e}"))
    }
}

impl From<tokio::task::JoinError> for AppError {
    fn from(e: tokio::task::JoinError) -> Self {
        Self::new(ErrorCode::Internal, format!("worker task failed: {e}"))
    }
}

impl From<axum::extract::rejection::JsonRejection> for AppError {
    fn from(e: axum::extract::rejection::JsonRejection) -> Self {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            return Self::new(ErrorCode::PayloadTooLarge, e.body_text());
        }
        Self::bad_request(e.body_text())
    }
}
