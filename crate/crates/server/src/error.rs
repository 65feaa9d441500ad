use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use exact_core::layout::LayoutError;
use exact_core::tiles::TileError;
use exact_core::Error;
use serde_json::json;
use thiserror::Error;

/// Failure talking to another instance.
#[derive(Debug, Error)]
pub enum PeerError {
    #[error("peer {0} unreachable: {1}")]
    Unreachable(String, String),
    #[error("peer {0} rejected the credentials")]
    AuthFailure(String),
    #[error("peer {0} answered {1}")]
    Status(String, u16),
    #[error("unexpected payload from peer {0}: {1}")]
    Payload(String, String),
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Peer(#[from] PeerError),
    #[error("{0}")]
    BadRequest(String),
    #[error("scoped tokens only grant tile reads")]
    ScopedToken,
    #[error("{0}")]
    NotFound(String),
}

impl ApiError {
    pub fn status_and_code(&self) -> (StatusCode, &'static str) {
        use StatusCode as S;
        match self {
            ApiError::BadRequest(_) => (S::BAD_REQUEST, "bad_request"),
            ApiError::ScopedToken => (S::FORBIDDEN, "scoped_token"),
            ApiError::NotFound(_) => (S::NOT_FOUND, "not_found"),
            ApiError::Peer(PeerError::Unreachable(..)) => (S::BAD_GATEWAY, "peer_unreachable"),
            ApiError::Peer(PeerError::AuthFailure(_)) => (S::BAD_REQUEST, "peer_auth_failure"),
            ApiError::Peer(_) => (S::BAD_GATEWAY, "peer_error"),
            ApiError::Core(e) => match e {
                Error::Unauthenticated => (S::UNAUTHORIZED, "unauthenticated"),
                Error::PermissionDenied => (S::FORBIDDEN, "permission_denied"),
                Error::TokenRevoked => (S::FORBIDDEN, "token_revoked"),
                Error::NotFound(..) => (S::NOT_FOUND, "not_found"),
                Error::ValidationFailed(_) => (S::BAD_REQUEST, "validation_failed"),
                Error::TemplateNotInProduct(_) => (S::BAD_REQUEST, "template_not_in_product"),
                Error::Deleted(_) => (S::CONFLICT, "deleted"),
                Error::UnknownPlaceholder(_) => (S::BAD_REQUEST, "unknown_placeholder"),
                Error::BadFilter(_) => (S::BAD_REQUEST, "bad_filter"),
                Error::InvalidInput(_) => (S::BAD_REQUEST, "invalid_input"),
                Error::Conflict(_) => (S::CONFLICT, "conflict"),
                Error::NotVirtual(_) => (S::BAD_REQUEST, "not_virtual"),
                Error::Tile(t) => match t {
                    TileError::Decode(_) | TileError::UnsupportedFormat(_) => {
                        (S::UNSUPPORTED_MEDIA_TYPE, "unsupported_format")
                    }
                    TileError::Storage(_) => (S::INSUFFICIENT_STORAGE, "storage"),
                    TileError::TileOutOfRange | TileError::LevelOutOfRange { .. } => (S::NOT_FOUND, "tile_out_of_range"),
                    TileError::ImageNotFound(_) => (S::NOT_FOUND, "not_found"),
                    TileError::DimensionMismatch { .. } => (S::BAD_REQUEST, "dimension_mismatch"),
                },
                Error::Screening(_) => (S::BAD_REQUEST, "screening"),
                Error::Layout(l) => match l {
                    LayoutError::EmptyCell { .. } => (S::NOT_FOUND, "empty_cell"),
                    LayoutError::SourceUnavailable(_) => (S::CONFLICT, "source_unavailable"),
                    _ => (S::BAD_REQUEST, "layout"),
                },
                Error::Storage(_) => (S::INSUFFICIENT_STORAGE, "storage"),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({"error": code, "detail": self.to_string()}))).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
