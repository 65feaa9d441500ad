use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::http::HeaderMap;
use base64::Engine;
use exact_core::{Actor, Error};

use crate::error::ApiError;
use crate::AppState;

/// Token from `Authorization: Token <t>` (`Bearer` is accepted too).
pub fn header_token(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, rest) = value.split_once(' ')?;
    matches!(scheme.to_ascii_lowercase().as_str(), "token" | "bearer").then(|| rest.trim().to_string())
}

/// `(username, password)` from an HTTP Basic header.
pub fn basic_credentials(headers: &HeaderMap) -> Option<(String, String)> {
    let value = headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, rest) = value.split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("basic") {
        return None;
    }
    let raw = base64::engine::general_purpose::STANDARD.decode(rest.trim()).ok()?;
    let (u, p) = std::str::from_utf8(&raw).ok()?.split_once(':')?;
    Some((u.to_string(), p.to_string()))
}

fn query_token(parts: &Parts) -> Option<String> {
    url::form_urlencoded::parse(parts.uri.query()?.as_bytes())
        .find(|(k, _)| k == "token")
        .map(|(_, v)| v.into_owned())
}

/// An authenticated user. Scoped share tokens are refused.
pub struct Caller(pub Actor);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = header_token(&parts.headers).ok_or(Error::Unauthenticated)?;
        match state.inst.authenticate(&token) {
            Ok(user) => Ok(Caller(Actor::User(user))),
            Err(_) if state.inst.is_scoped_token(&token) => Err(ApiError::ScopedToken),
            Err(e) => Err(e.into()),
        }
    }
}

/// Either a user or a scoped share token; used by the tile route only.
/// The token may also come from a `token` query parameter so that
/// redirected viewers can fetch tiles.
pub enum TileCaller {
    User(Actor),
    Scoped(String),
}

impl FromRequestParts<AppState> for TileCaller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = header_token(&parts.headers)
            .or_else(|| query_token(parts))
            .ok_or(Error::Unauthenticated)?;
        match state.inst.authenticate(&token) {
            Ok(user) => Ok(TileCaller::User(Actor::User(user))),
            Err(_) if state.inst.is_scoped_token(&token) => Ok(TileCaller::Scoped(token)),
            Err(e) => Err(e.into()),
        }
    }
}
