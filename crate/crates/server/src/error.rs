use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use loghier_core::corpus::CorpusError;
use loghier_core::decompose::DecomposeError;
use loghier_core::detector::DetectError;
use loghier_core::hierarchy::HierarchyError;
use loghier_core::kb::KbError;
use loghier_core::llm::{FixtureError, LlmError};
use loghier_core::metrics::EvalError;
use loghier_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Wire form of every error response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.to_string(), message: message.into(), detail: Value::Null } }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.body.detail = detail;
        self
    }

    pub fn tree_not_ready() -> Self {
        Self::new(StatusCode::CONFLICT, "TreeNotReady", "hierarchy has not been extracted yet")
    }

    pub fn catalog_not_ready() -> Self {
        Self::new(StatusCode::CONFLICT, "CatalogNotReady", "no templates have been loaded")
    }

    pub fn not_found(code: &str, what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, format!("{what} not found"))
            .with_detail(serde_json::json!({ "id": what }))
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

fn status_for(code: &str) -> StatusCode {
    match code {
        "MalformedRecord"
        | "DuplicateTemplateId"
        | "EmptyFile"
        | "UnknownTemplateId"
        | "LabeledTrainAnomaly"
        | "DuplicateSequenceId"
        | "MalformedFixture"
        | "InvalidConfig"
        | "UnlabeledCorpus"
        | "ConvertError" => StatusCode::BAD_REQUEST,
        "UnknownKey" | "UnknownNode" => StatusCode::NOT_FOUND,
        "ConflictingVerdict" => StatusCode::CONFLICT,
        "LlmUnavailable" => StatusCode::SERVICE_UNAVAILABLE,
        "VerdictUnparseable" | "ExtractionInvalid" => StatusCode::BAD_GATEWAY,
        "IoError" | "CorruptStore" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

fn detail_for(err: &Error) -> Value {
    use serde_json::json;
    match err {
        Error::Detect(DetectError::LlmCallBudgetExceeded(cap)) => json!({ "cap": cap }),
        Error::Corpus(CorpusError::UnknownTemplateId { seq_id, template_id }) => {
            json!({ "sequence_id": seq_id, "template_id": template_id })
        }
        Error::Corpus(CorpusError::MalformedRecord { line, .. }) => json!({ "line": line }),
        Error::Kb(KbError::UnknownKey(key)) => json!({ "key": key }),
        Error::Kb(KbError::UnknownNode(node)) => json!({ "node": node }),
        _ => Value::Null,
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let code = err.code();
        Self {
            status: status_for(code),
            body: ErrorBody { code: code.to_string(), message: err.to_string(), detail: detail_for(&err) },
        }
    }
}

macro_rules! via_core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for ApiError {
            fn from(err: $t) -> Self {
                Error::from(err).into()
            }
        }
    )*};
}

via_core_error!(CorpusError, DecomposeError, DetectError, HierarchyError, KbError, LlmError, FixtureError, EvalError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses() {
        let e: ApiError = DetectError::LlmCallBudgetExceeded(3).into();
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(e.body.code, "LlmCallBudgetExceeded");
        assert_eq!(e.body.detail["cap"], 3);

        let e: ApiError = LlmError::Unavailable("down".into()).into();
        assert_eq!((e.status, e.body.code.as_str()), (StatusCode::SERVICE_UNAVAILABLE, "LlmUnavailable"));

        let e: ApiError = CorpusError::DuplicateTemplateId("E1".into()).into();
        assert_eq!(e.status, StatusCode::BAD_REQUEST);

        let e: ApiError = KbError::UnknownKey("S|root|x".into()).into();
        assert_eq!(e.status, StatusCode::NOT_FOUND);
    }
}
