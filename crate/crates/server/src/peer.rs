//! HTTP client for talking to other instances.

use std::time::Duration;

use exact_core::{AnnotationRecord, AnnotationTemplate, ImageId, ImageSetId};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::dto::ImageDto;
use crate::error::PeerError;

#[derive(Deserialize)]
struct PageOf<T> {
    count: usize,
    results: Vec<T>,
}

#[derive(Deserialize)]
struct TokenReply {
    token: String,
}

#[derive(Clone)]
pub struct PeerClient {
    http: reqwest::Client,
}

impl Default for PeerClient {
    fn default() -> Self {
        Self::new()
    }
}

impl PeerClient {
    pub fn new() -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .timeout(Duration::from_secs(60))
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .expect("http client");
        PeerClient { http }
    }

    fn unreachable(base: &str, e: reqwest::Error) -> PeerError {
        PeerError::Unreachable(base.to_string(), e.to_string())
    }

    pub async fn login(&self, base: &str, username: &str, password: &str) -> Result<String, PeerError> {
        let resp = self
            .http
            .post(format!("{base}/api/v1/auth/token"))
            .basic_auth(username, Some(password))
            .send()
            .await
            .map_err(|e| Self::unreachable(base, e))?;
        match resp.status() {
            s if s.is_success() => Ok(resp
                .json::<TokenReply>()
                .await
                .map_err(|e| PeerError::Payload(base.into(), e.to_string()))?
                .token),
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(PeerError::AuthFailure(base.into())),
            s => Err(PeerError::Status(base.into(), s.as_u16())),
        }
    }

    async fn get<T: DeserializeOwned>(&self, base: &str, path: &str, token: &str, query: &[(&str, String)]) -> Result<T, PeerError> {
        let resp = self
            .http
            .get(format!("{base}{path}"))
            .header("Authorization", format!("Token {token}"))
            .query(query)
            .send()
            .await
            .map_err(|e| Self::unreachable(base, e))?;
        match resp.status() {
            s if s.is_success() => resp
                .json()
                .await
                .map_err(|e| PeerError::Payload(base.into(), e.to_string())),
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(PeerError::AuthFailure(base.into())),
            s => Err(PeerError::Status(base.into(), s.as_u16())),
        }
    }

    /// Every item of a paginated listing.
    async fn all<T: DeserializeOwned>(&self, base: &str, path: &str, token: &str, filter: (&str, String)) -> Result<Vec<T>, PeerError> {
        let mut out = Vec::new();
        loop {
            let page: PageOf<T> = self
                .get(
                    base,
                    path,
                    token,
                    &[filter.clone(), ("limit", "1000".into()), ("offset", out.len().to_string())],
                )
                .await?;
            let done = page.results.is_empty();
            out.extend(page.results);
            if done || out.len() >= page.count {
                return Ok(out);
            }
        }
    }

    pub async fn images(&self, base: &str, token: &str, set: ImageSetId) -> Result<Vec<ImageDto>, PeerError> {
        self.all(base, "/api/v1/images/", token, ("image_set", set.to_string())).await
    }

    pub async fn annotations(&self, base: &str, token: &str, image: ImageId) -> Result<Vec<AnnotationRecord>, PeerError> {
        self.all(base, "/api/v1/annotations/", token, ("image", image.to_string())).await
    }

    pub async fn templates(&self, base: &str, token: &str) -> Result<Vec<AnnotationTemplate>, PeerError> {
        self.all(base, "/api/v1/annotationtypes/", token, ("ordering", "id".into())).await
    }

    /// Raw tile bytes and content type from `url`.
    pub async fn tile(&self, base: &str, url: &str) -> Result<(Vec<u8>, String), PeerError> {
        let resp = self.http.get(url).send().await.map_err(|e| Self::unreachable(base, e))?;
        match resp.status() {
            s if s.is_success() => {
                let ct = resp
                    .headers()
                    .get(reqwest::header::CONTENT_TYPE)
                    .and_then(|v| v.to_str().ok())
                    .unwrap_or("application/octet-stream")
                    .to_string();
                let bytes = resp.bytes().await.map_err(|e| Self::unreachable(base, e))?;
                Ok((bytes.to_vec(), ct))
            }
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(PeerError::AuthFailure(base.into())),
            s => Err(PeerError::Status(base.into(), s.as_u16())),
        }
    }
}
