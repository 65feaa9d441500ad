use thiserror::Error;

use crate::layout::LayoutError;
use crate::model::VectorError;
use crate::screening::ScreeningError;
use crate::tiles::TileError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("authentication required")]
    Unauthenticated,
    #[error("permission denied")]
    PermissionDenied,
    #[error("{0} {1} not found")]
    NotFound(&'static str, u64),
    #[error("validation failed: {0}")]
    ValidationFailed(#[from] VectorError),
    #[error("annotation template {0} is not attached to the image set")]
    TemplateNotInProduct(u64),
    #[error("annotation {0} is deleted")]
    Deleted(u64),
    #[error("unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("bad filter: {0}")]
    BadFilter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("image set {0} is not virtual")]
    NotVirtual(u64),
    #[error("scoped token revoked")]
    TokenRevoked,
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Screening(#[from] ScreeningError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
