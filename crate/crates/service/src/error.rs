use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde_json::json;

use grader_core::analytics::AnalyticsError;
use grader_core::calibration::CalibrationError;
use grader_core::ingestion::IngestError;
use grader_core::pipeline::PipelineError;
use grader_core::provider::ProviderError;
use grader_core::review::ReviewError;
use grader_core::rubric::RubricError;
use grader_core::store::StoreError;

/// Service-level error; each variant maps to one HTTP status.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl AppError {
    pub fn status(&self) -> StatusCode {
        match self {
            AppError::BadRequest(_) => StatusCode::BAD_REQUEST,
            AppError::NotFound(_) => StatusCode::NOT_FOUND,
            AppError::Conflict(_) => StatusCode::CONFLICT,
            AppError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            AppError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            AppError::BadRequest(_) => "validation",
            AppError::NotFound(_) => "not_found",
            AppError::Conflict(_) => "conflict",
            AppError::Unavailable(_) => "provider_unavailable",
            AppError::Internal(_) => "internal",
        }
    }

    pub fn bad(msg: impl Into<String>) -> Self {
        AppError::BadRequest(msg.into())
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.kind(), "message": self.to_string() });
        (self.status(), axum::Json(body)).into_response()
    }
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => AppError::NotFound(e.to_string()),
            StoreError::AlreadyExists { .. } | StoreError::VersionConflict { .. } => AppError::Conflict(e.to_string()),
            StoreError::Rejected(_) => AppError::BadRequest(e.to_string()),
            StoreError::Io(_) | StoreError::Corrupt(_) => AppError::Internal(e.to_string()),
        }
    }
}

impl From<ProviderError> for AppError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Unavailable(_) => AppError::Unavailable(e.to_string()),
            ProviderError::MalformedOutput(_) => AppError::Unavailable(e.to_string()),
            ProviderError::Precondition(_) => AppError::Conflict(e.to_string()),
        }
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidQuestion(..) => AppError::BadRequest(e.to_string()),
            PipelineError::RunAlreadyActive(_)
            | PipelineError::PriorRunNotCompleted(_)
            | PipelineError::QuestionMismatch(_) => AppError::Conflict(e.to_string()),
        }
    }
}

impl From<ReviewError> for AppError {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::UnknownRecord(_) => AppError::NotFound(e.to_string()),
            ReviewError::RunNotCompleted | ReviewError::GradingIncomplete(_) => AppError::Conflict(e.to_string()),
            ReviewError::NothingToConfirm(_)
            | ReviewError::RubricRequired(_)
            | ReviewError::MultipleChoiceOverride(_)
            | ReviewError::UnknownRubricItem(_) => AppError::BadRequest(e.to_string()),
        }
    }
}

impl From<CalibrationError> for AppError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Provider(p) => p.into(),
            CalibrationError::Pipeline(p) => p.into(),
            CalibrationError::Review(r) => r.into(),
            CalibrationError::UnknownWisdom(_) => AppError::NotFound(e.to_string()),
            CalibrationError::NoCompletedRun(_)
            | CalibrationError::SessionClosed(_)
            | CalibrationError::InvalidTransition { .. } => AppError::Conflict(e.to_string()),
            _ => AppError::BadRequest(e.to_string()),
        }
    }
}

impl From<IngestError> for AppError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::AlreadyMatched(_) => AppError::Conflict(e.to_string()),
            _ => AppError::BadRequest(e.to_string()),
        }
    }
}

impl From<RubricError> for AppError {
    fn from(e: RubricError) -> Self {
        AppError::BadRequest(e.to_string())
    }
}

impl From<AnalyticsError> for AppError {
    fn from(e: AnalyticsError) -> Self {
        AppError::BadRequest(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Internal(format!("serialization: {e}"))
    }
}
