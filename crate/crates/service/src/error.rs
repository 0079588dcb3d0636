use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};

use crowdlab_core::analysis::AnalysisError;
use crowdlab_core::engine::EngineError;
use crowdlab_core::store::StoreError;
use crowdlab_core::worker::WorkerError;
use crowdlab_core::workflow::Violation;

/// An error with a stable machine-readable code. Rendered as
/// `{"error": {"code", "message", "details"?}}` over HTTP and as one JSON
/// line on stderr by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn with_code(mut self, code: &'static str) -> Self {
        self.code = code;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid-body", message)
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", what)
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn forbidden(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn invalid_workflow(violations: &[Violation]) -> Self {
        let summary = violations.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; ");
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-workflow", summary)
            .with_details(serde_json::to_value(violations).unwrap_or(Value::Null))
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(&json!({ "error": self })).unwrap_or_default()
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => Self::not_found(what),
            StoreError::WriteOnce(key) => Self::conflict("already-exists", format!("{key} already exists")),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Invalid(v) => Self::invalid_workflow(&v),
            EngineError::UnknownRun(id) => Self::not_found(format!("run {id}")),
            EngineError::NotRunning(id) => Self::conflict("not-running", format!("run {id} is not running")),
            EngineError::Store(s) => s.into(),
            EngineError::Worker(w) => w.into(),
            EngineError::Platform(p) => Self::new(StatusCode::BAD_GATEWAY, "platform", p.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<WorkerError> for ApiError {
    fn from(e: WorkerError) -> Self {
        match e {
            WorkerError::Store(s) => s.into(),
            WorkerError::UnknownRun(id) => Self::not_found(format!("run {id}")),
            WorkerError::NotRunning(id) => Self::conflict("not-running", format!("run {id} is not running")),
            other => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-request", other.to_string()),
        }
    }
}

impl From<AnalysisError> for ApiError {
    fn from(e: AnalysisError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "analysis", e.to_string())
    }
}
