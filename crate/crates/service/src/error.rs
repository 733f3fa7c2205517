use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use itermask::ErrorCategory;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0} not found")]
    NotFound(String),

    #[error("{0}")]
    BadRequest(String),

    #[error("{0}")]
    Conflict(String),

    #[error(transparent)]
    Core(#[from] itermask::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    category: &'a str,
    message: String,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Core(e) => match (e, e.category()) {
                (itermask::Error::Terminated, _) => StatusCode::CONFLICT,
                (itermask::Error::OutOfRange(_), _) => StatusCode::UNPROCESSABLE_ENTITY,
                (_, ErrorCategory::Validation | ErrorCategory::Config) => StatusCode::BAD_REQUEST,
                (_, ErrorCategory::ModelMismatch) => StatusCode::CONFLICT,
                (_, ErrorCategory::Io | ErrorCategory::Internal) => StatusCode::INTERNAL_SERVER_ERROR,
            },
        }
    }

    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::NotFound(_) => "not_found",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Conflict(_) => "conflict",
            ApiError::Internal(_) => "internal",
            ApiError::Core(itermask::Error::Terminated) => "terminated",
            ApiError::Core(itermask::Error::OutOfRange(_)) => "out_of_range",
            ApiError::Core(_) => "invalid",
        }
    }

    fn category(&self) -> &'static str {
        let category = match self {
            ApiError::Core(e) => e.category(),
            ApiError::Internal(_) => ErrorCategory::Internal,
            _ => ErrorCategory::Validation,
        };
        match category {
            ErrorCategory::Validation => "validation",
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::ModelMismatch => "model_mismatch",
            ErrorCategory::Internal => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code(),
                category: self.category(),
                message: self.to_string(),
            },
        };
        (status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
