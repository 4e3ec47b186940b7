use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// One rejected request field, addressed by a dotted path such as
/// `targets.forehead` or `params.gamma_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug)]
pub enum ApiError {
    Invalid {
        fields: Vec<FieldError>,
        /// Set when a target names an unknown zone.
        valid_zone_ids: Option<Vec<String>>,
    },
    TooLarge(String),
    Unavailable(String),
    /// Logged under a fresh id; only the id reaches the client.
    Internal(String),
}

impl ApiError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        ApiError::Invalid {
            fields: vec![FieldError::new(field, message)],
            valid_zone_ids: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::Invalid {
                fields,
                valid_zone_ids,
            } => {
                let mut body = json!({ "error": "validation", "fields": fields });
                if let Some(ids) = valid_zone_ids {
                    body["valid_zone_ids"] = json!(ids);
                }
                (StatusCode::BAD_REQUEST, Json(body)).into_response()
            }
            ApiError::TooLarge(message) => (
                StatusCode::PAYLOAD_TOO_LARGE,
                Json(json!({ "error": "too_large", "message": message })),
            )
                .into_response(),
            ApiError::Unavailable(message) => (
                StatusCode::SERVICE_UNAVAILABLE,
                Json(json!({ "error": "unavailable", "message": message })),
            )
                .into_response(),
            ApiError::Internal(detail) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("internal error {id}: {detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({ "error": "internal", "id": id })),
                )
                    .into_response()
            }
        }
    }
}
