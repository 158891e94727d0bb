use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

/// Error body `{"error": "..."}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    pub fn bad_request(e: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.to_string())
    }

    pub fn invalid(e: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
    }

    pub fn not_found(e: impl ToString) -> Self {
        Self::new(StatusCode::NOT_FOUND, e.to_string())
    }

    pub fn conflict(e: impl ToString) -> Self {
        Self::new(StatusCode::CONFLICT, e.to_string())
    }

    pub fn internal(e: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status.as_u16(), self.message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        Self::internal(format!("worker failed: {e}"))
    }
}
