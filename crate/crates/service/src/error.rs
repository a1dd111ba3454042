use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use nestcrt::Error;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Error responses. Bodies are `{"error": kind, "message": ..., ...}`.
#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    /// 400: malformed body or a field outside its admissible range.
    Validation(Vec<FieldError>),
    /// 422: well-formed request the calculators cannot satisfy.
    Domain { message: String, violated: Vec<String> },
    NotFound(String),
    UnsupportedMediaType,
    /// 503: the job store is full of unfinished jobs.
    Busy,
    Internal(String),
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    fields: Option<&'a [FieldError]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    violated: Option<&'a [String]>,
}

impl ApiError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::Validation(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub fn domain(message: impl Into<String>) -> Self {
        ApiError::Domain {
            message: message.into(),
            violated: Vec::new(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Validation(_) => StatusCode::BAD_REQUEST,
            ApiError::Domain { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::UnsupportedMediaType => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ApiError::Busy => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter { name, reason } => ApiError::field(name, reason),
            Error::Parse(msg) => ApiError::field("body", msg),
            Error::InvalidCorrelation { violated, message } => ApiError::Domain {
                message: format!("correlation matrix is not positive definite: {message}"),
                violated: violated.iter().map(|i| format!("lambda{i}")).collect(),
            },
            Error::Io(msg) => ApiError::Internal(msg),
            other => ApiError::domain(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let (kind, message, fields, violated) = match &self {
            ApiError::Validation(f) => (
                "validation",
                f.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "),
                Some(f.as_slice()),
                None,
            ),
            ApiError::Domain { message, violated } => (
                "domain",
                message.clone(),
                None,
                Some(violated.as_slice()).filter(|v| !v.is_empty()),
            ),
            ApiError::NotFound(m) => ("not_found", m.clone(), None, None),
            ApiError::UnsupportedMediaType => ("unsupported_media_type", "expected application/json".into(), None, None),
            ApiError::Busy => ("busy", "job store is full".into(), None, None),
            ApiError::Internal(m) => ("internal", m.clone(), None, None),
        };
        let body = Body {
            error: kind,
            message,
            fields,
            violated,
        };
        (status, Json(body)).into_response()
    }
}
