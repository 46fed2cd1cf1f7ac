use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use cfexplain_core::envs::EnvError;
use cfexplain_core::explain::ExplainError;
use cfexplain_core::graph::GraphError;
use cfexplain_core::session::SessionError;

/// An error response: `{"error": code, "message": text}` with a status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "invalid_request",
            message: message.into(),
        }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            code: "non_replayable",
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            error: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<EnvError> for ApiError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::NonReplayable(_) => ApiError::conflict(e.to_string()),
            EnvError::UnknownEnv(_)
            | EnvError::UnknownPolicy(_)
            | EnvError::PolicyFile(_)
            | EnvError::InvalidHyperparameter(_) => ApiError::invalid(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<GraphError> for ApiError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::NodeNotFound(_) => ApiError::not_found(e.to_string()),
            GraphError::InvalidXi(_) | GraphError::BadHorizon | GraphError::BadDirection { .. } => {
                ApiError::invalid(e.to_string())
            }
            GraphError::NonReplayableEpisode(_) => ApiError::conflict(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<ExplainError> for ApiError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::AgentDead { .. } | ExplainError::StepOutOfRange { .. } => {
                ApiError::not_found(e.to_string())
            }
            ExplainError::InvalidFraction(_) => ApiError::invalid(e.to_string()),
            ExplainError::Graph(g) => g.into(),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::NonReplayable(_) => ApiError::conflict(e.to_string()),
            SessionError::Parse(_)
            | SessionError::InvalidEdit(_)
            | SessionError::StepOutOfRange { .. } => ApiError::invalid(e.to_string()),
            SessionError::Env(env) => env.into(),
            SessionError::Io(_) => ApiError::internal(e.to_string()),
        }
    }
}
