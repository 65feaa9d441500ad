//! Offset pagination with `next`/`previous` links.

use serde::Serialize;

use crate::error::ApiError;

pub const DEFAULT_LIMIT: usize = 50;
pub const MAX_LIMIT: usize = 1000;

#[derive(Debug, Serialize)]
pub struct Page<T> {
    pub count: usize,
    pub next: Option<String>,
    pub previous: Option<String>,
    pub results: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub limit: usize,
    pub offset: usize,
}

/// Reads `limit` and `offset` from a raw query string.
pub fn window(query: Option<&str>) -> Result<Window, ApiError> {
    let mut w = Window {
        limit: DEFAULT_LIMIT,
        offset: 0,
    };
    for (k, v) in url::form_urlencoded::parse(query.unwrap_or("").as_bytes()) {
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| ApiError::BadRequest(format!("{k} must be a non-negative integer")))
        };
        match k.as_ref() {
            "limit" => w.limit = parse(&v)?,
            "offset" => w.offset = parse(&v)?,
            _ => {}
        }
    }
    if w.limit == 0 {
        return Err(ApiError::BadRequest("limit must be at least 1".into()));
    }
    w.limit = w.limit.min(MAX_LIMIT);
    Ok(w)
}

fn link(base: &str, path: &str, query: Option<&str>, limit: usize, offset: usize) -> String {
    let mut s = url::form_urlencoded::Serializer::new(String::new());
    for (k, v) in url::form_urlencoded::parse(query.unwrap_or("").as_bytes()) {
        if k != "limit" && k != "offset" {
            s.append_pair(&k, &v);
        }
    }
    s.append_pair("limit", &limit.to_string());
    s.append_pair("offset", &offset.to_string());
    format!("{base}{path}?{}", s.finish())
}

impl<T> Page<T> {
    /// Wraps one page of `count` total results.
    pub fn new(results: Vec<T>, count: usize, w: Window, base: &str, path: &str, query: Option<&str>) -> Self {
        let next = (w.offset + w.limit < count).then(|| link(base, path, query, w.limit, w.offset + w.limit));
        let previous = (w.offset > 0).then(|| link(base, path, query, w.limit, w.offset.saturating_sub(w.limit)));
        Page {
            count,
            next,
            previous,
            results,
        }
    }

    /// Pages an in-memory list.
    pub fn slice(all: Vec<T>, w: Window, base: &str, path: &str, query: Option<&str>) -> Self {
        let count = all.len();
        let results = all.into_iter().skip(w.offset).take(w.limit).collect();
        Self::new(results, count, w, base, path, query)
    }
}
