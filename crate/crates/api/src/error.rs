use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use rrp_core::bundler::BundleError;
use rrp_core::orchestrator::OrchestratorError;
use rrp_core::rdms::RdmsError;
use rrp_core::runtime::RuntimeError;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Error body returned by every endpoint: `{"error": code, "message": text}`
/// plus optional detail fields (for example `permIds`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(flatten)]
    pub details: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error: code.into(), message: message.into(), details: Map::new() } }
    }

    pub fn with_detail(mut self, key: &str, value: impl Serialize) -> Self {
        self.body.details.insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing, unknown or expired token")
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Io", e.to_string())
    }
}

/// Leading identifier of a `Debug` rendering, i.e. the variant name.
fn variant(e: &impl std::fmt::Debug) -> String {
    let dbg = format!("{e:?}");
    dbg.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect()
}

impl From<RdmsError> for ApiError {
    fn from(e: RdmsError) -> Self {
        let status = match &e {
            RdmsError::AuthFailed => StatusCode::UNAUTHORIZED,
            RdmsError::DatasetNotFound(_) | RdmsError::ObjectNotFound(_) => StatusCode::NOT_FOUND,
            RdmsError::InvalidPath(_) | RdmsError::EmptyDataset => StatusCode::BAD_REQUEST,
            _ => StatusCode::BAD_GATEWAY,
        };
        let code = match &e {
            RdmsError::ServerUnreachable(_) => "RdmsUnreachable".to_owned(),
            other => variant(other),
        };
        ApiError::new(status, &code, e.to_string())
    }
}

impl From<RuntimeError> for ApiError {
    fn from(e: RuntimeError) -> Self {
        let status = match &e {
            RuntimeError::InvalidLimits(_) | RuntimeError::ResourceDenied(_) => StatusCode::BAD_REQUEST,
            RuntimeError::ReadOnly(_) | RuntimeError::PathEscape(_) => StatusCode::FORBIDDEN,
            RuntimeError::FileNotFound(_) | RuntimeError::UnknownSession(_) => StatusCode::NOT_FOUND,
            RuntimeError::AuthFailed => StatusCode::UNAUTHORIZED,
            RuntimeError::DaemonUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            RuntimeError::RegistryUnreachable(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, &variant(&e), e.to_string())
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError::*;
        let status = match e {
            Rdms(inner) => return inner.into(),
            Runtime(inner) => return inner.into(),
            UnknownProject(_) | ShareNotFound(_) | ResultNotFound(_) => StatusCode::NOT_FOUND,
            NameTaken(_) | InvalidState { .. } | RepositoryDirty | DirtyWorkspace | RebuildRequired(_)
            | NoActiveSession(_) | NoImage(_) => StatusCode::CONFLICT,
            InvalidResources(_) | Project(_) | Plan(_) => StatusCode::BAD_REQUEST,
            StartFailed(_) | Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, &variant(&e), e.to_string())
    }
}

impl From<BundleError> for ApiError {
    fn from(e: BundleError) -> Self {
        let message = e.to_string();
        let code = variant(&e);
        let status = match e {
            BundleError::Orchestrator(inner) => return inner.into(),
            BundleError::Rdms(inner) => return inner.into(),
            BundleError::UnpublishedDatasets(ids) => {
                return ApiError::new(StatusCode::CONFLICT, "UnpublishedDatasets", message).with_detail("permIds", ids);
            }
            BundleError::ImageNotPublished(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, &code, message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rrp_core::orchestrator::ProjectStatus;

    #[test]
    fn statuses_follow_error_kinds() {
        let cases: Vec<(ApiError, u16, &str)> = vec![
            (OrchestratorError::UnknownProject("p".into()).into(), 404, "UnknownProject"),
            (OrchestratorError::RepositoryDirty.into(), 409, "RepositoryDirty"),
            (
                OrchestratorError::InvalidState { project_id: "p".into(), status: ProjectStatus::Building, operation: "start" }
                    .into(),
                409,
                "InvalidState",
            ),
            (OrchestratorError::Rdms(RdmsError::ServerUnreachable("x".into())).into(), 502, "RdmsUnreachable"),
            (RdmsError::AuthFailed.into(), 401, "AuthFailed"),
            (BundleError::UnpublishedDatasets(vec!["a".into()]).into(), 409, "UnpublishedDatasets"),
        ];
        for (err, status, code) in cases {
            assert_eq!(err.status.as_u16(), status, "{code}");
            assert_eq!(err.body.error, code);
        }
    }

    #[test]
    fn details_are_flattened_into_the_body() {
        let err: ApiError = BundleError::UnpublishedDatasets(vec!["20240101-1".into()]).into();
        let json = serde_json::to_value(&err.body).unwrap();
        assert_eq!(json["permIds"], serde_json::json!(["20240101-1"]));
        assert!(json["message"].as_str().unwrap().contains("20240101-1"));
    }
}
