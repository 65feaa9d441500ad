#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::BTreeSet;

use exact_core::{Actor, Right};
use exact_server::{Config, RunningServer};
use image::{Rgba, RgbaImage};
use reqwest::blocking::{multipart, Client};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};
use tempfile::TempDir;

pub fn gradient(w: u32, h: u32) -> RgbaImage {
    RgbaImage::from_fn(w, h, |x, y| Rgba([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8, 255]))
}

pub fn png_bytes(img: &RgbaImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

pub fn start() -> (TempDir, RunningServer) {
    let dir = tempfile::tempdir().unwrap();
    let server = exact_server::spawn(Config {
        storage_root: dir.path().to_path_buf(),
        bind: "127.0.0.1:0".parse().unwrap(),
        db_path: None,
        base_url: None,
    })
    .unwrap();
    (dir, server)
}

/// An HTTP client bound to one user on one server. Every response body is
/// kept in `transcript` so tests can scan what was sent back.
pub struct Session {
    pub http: Client,
    pub root: String,
    pub token: String,
    pub transcript: RefCell<Vec<u8>>,
}

pub fn client() -> Client {
    Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .timeout(std::time::Duration::from_secs(120))
        .build()
        .unwrap()
}

pub fn login(root: &str, username: &str, password: &str) -> Session {
    let http = client();
    let r = http
        .post(format!("{root}/api/v1/auth/token"))
        .json(&json!({"username": username, "password": password}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK, "login {username}");
    let token = r.json::<Value>().unwrap()["token"].as_str().unwrap().to_string();
    Session {
        http,
        root: root.to_string(),
        token,
        transcript: RefCell::new(Vec::new()),
    }
}

impl Session {
    pub fn with_token(&self, token: &str) -> Session {
        Session {
            http: self.http.clone(),
            root: self.root.clone(),
            token: token.to_string(),
            transcript: RefCell::new(Vec::new()),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.root)
    }

    fn record(&self, r: reqwest::blocking::Response) -> (StatusCode, Vec<u8>) {
        let status = r.status();
        let mut t = self.transcript.borrow_mut();
        for (k, v) in r.headers() {
            t.extend_from_slice(k.as_str().as_bytes());
            t.extend_from_slice(v.as_bytes());
        }
        let body = r.bytes().unwrap().to_vec();
        t.extend_from_slice(&body);
        (status, body)
    }

    pub fn call(&self, method: Method, path: &str, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
        let mut req = self
            .http
            .request(method, self.url(path))
            .header("Authorization", format!("Token {}", self.token));
        if let Some(b) = body {
            req = req.json(b);
        }
        self.record(req.send().unwrap())
    }

    /// Calls and parses JSON, panicking unless the status is `want`.
    pub fn expect(&self, method: Method, path: &str, body: Option<&Value>, want: u16) -> Value {
        let (status, bytes) = self.call(method.clone(), path, body);
        assert_eq!(
            status.as_u16(),
            want,
            "{method} {path}: {}",
            String::from_utf8_lossy(&bytes)
        );
        if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
        }
    }

    pub fn get(&self, path: &str) -> Value {
        self.expect(Method::GET, path, None, 200)
    }

    pub fn get_text(&self, path: &str) -> String {
        let (status, bytes) = self.call(Method::GET, path, None);
        assert_eq!(status, StatusCode::OK, "GET {path}");
        String::from_utf8(bytes).unwrap()
    }

    pub fn post(&self, path: &str, body: Value) -> Value {
        self.expect(Method::POST, path, Some(&body), 201)
    }

    pub fn post_ok(&self, path: &str, body: Value) -> Value {
        self.expect(Method::POST, path, Some(&body), 200)
    }

    pub fn upload(&self, set: u64, name: &str, bytes: Vec<u8>) -> (StatusCode, Value) {
        let form = multipart::Form::new()
            .text("image_set", set.to_string())
            .part("file", multipart::Part::bytes(bytes).file_name(name.to_string()));
        let r = self
            .http
            .post(self.url("/images/"))
            .header("Authorization", format!("Token {}", self.token))
            .multipart(form)
            .send()
            .unwrap();
        let (status, body) = self.record(r);
        (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
    }

    pub fn upload_ok(&self, set: u64, name: &str, bytes: Vec<u8>) -> Value {
        let (status, v) = self.upload(set, name, bytes);
        assert_eq!(status, StatusCode::CREATED, "upload {name}: {v}");
        v
    }

    /// Every result of a paginated list, following `next` links.
    pub fn all_pages(&self, path: &str) -> Vec<Value> {
        let mut out = Vec::new();
        let mut url = self.url(path);
        loop {
            let r = self
                .http
                .get(&url)
                .header("Authorization", format!("Token {}", self.token))
                .send()
                .unwrap();
            let (status, body) = self.record(r);
            assert_eq!(status, StatusCode::OK, "GET {url}");
            let page: Value = serde_json::from_slice(&body).unwrap();
            out.extend(page["results"].as_array().unwrap().iter().cloned());
            match page["next"].as_str() {
                Some(n) => url = n.to_string(),
                None => return out,
            }
        }
    }

    pub fn tile(&self, image: u64, frame: u32, level: u32, col: u32, row: u32) -> (StatusCode, Vec<u8>) {
        self.call(Method::GET, &format!("/images/{image}/{frame}/{level}/{col}_{row}.png"), None)
    }
}

pub fn id(v: &Value) -> u64 {
    v["id"].as_u64().unwrap_or_else(|| panic!("no id in {v}"))
}

/// A running server with an admin, a team, two box templates, a product
/// and an image set.
pub struct World {
    pub server: RunningServer,
    pub admin: Session,
    pub team: u64,
    pub cell: u64,
    pub mitosis: u64,
    pub product: u64,
    pub set: u64,
    pub dir: TempDir,
}

pub const ANNOTATOR: &[&str] = &["read", "create", "update", "delete", "verify"];

impl World {
    pub fn new() -> World {
        let (dir, server) = start();
        server.inst.create_user(Actor::System, "admin", "admin-pw", true).unwrap();
        let admin = login(&server.base_url, "admin", "admin-pw");
        let team = id(&admin.post("/teams/", json!({"name": "lab"})));
        let me = admin.get("/users/")["results"][0]["id"].as_u64().unwrap();
        admin.expect(
            Method::PUT,
            &format!("/teams/{team}/members/{me}"),
            Some(&json!({"rights": Right::ALL})),
            200,
        );
        let cell = id(&admin.post(
            "/annotationtypes/",
            json!({"name": "cell", "vector_kind": "box", "default_width": 50, "default_height": 50}),
        ));
        let mitosis = id(&admin.post("/annotationtypes/", json!({"name": "mitosis", "vector_kind": "box"})));
        let product = id(&admin.post("/products/", json!({"name": "cells", "annotation_types": [cell, mitosis]})));
        let set = World::make_set(&admin, team, product, "slides", false);
        World {
            dir,
            server,
            admin,
            team,
            cell,
            mitosis,
            product,
            set,
        }
    }

    pub fn make_set(admin: &Session, team: u64, product: u64, name: &str, is_virtual: bool) -> u64 {
        let set = id(&admin.post(
            "/imagesets/",
            json!({"team": team, "name": name, "is_virtual": is_virtual}),
        ));
        admin.post_ok(&format!("/imagesets/{set}/products"), json!({"product": product}));
        set
    }

    pub fn set(&self, name: &str, is_virtual: bool) -> u64 {
        World::make_set(&self.admin, self.team, self.product, name, is_virtual)
    }

    /// Creates a user with `rights` in the team and logs in as them.
    pub fn user(&self, name: &str, rights: &[&str]) -> Session {
        let u = id(&self.admin.post("/users/", json!({"username": name, "password": "pw"})));
        let rights: BTreeSet<&str> = rights.iter().copied().collect();
        self.admin.expect(
            Method::PUT,
            &format!("/teams/{}/members/{u}", self.team),
            Some(&json!({"rights": rights})),
            200,
        );
        login(&self.server.base_url, name, "pw")
    }

    pub fn annotate(&self, who: &Session, image: u64, template: u64, x: f64, y: f64, meta: Value) -> Value {
        who.post(
            "/annotations/",
            json!({
                "image": image,
                "annotation_type": template,
                "vector": {"x1": x, "y1": y, "x2": x + 40.0, "y2": y + 30.0},
                "meta": meta,
            }),
        )
    }
}

/// Non-tile endpoints with every path parameter filled in.
pub fn non_tile_endpoints(image: u64, set: u64, annotation: u64, team: u64, version: u64) -> Vec<(Method, String)> {
    use Method as M;
    vec![
        (M::GET, "/users/".into()),
        (M::POST, "/users/".into()),
        (M::GET, "/users/1".into()),
        (M::POST, "/users/1/deactivate".into()),
        (M::GET, "/teams/".into()),
        (M::POST, "/teams/".into()),
        (M::GET, format!("/teams/{team}")),
        (M::GET, format!("/teams/{team}/members")),
        (M::PUT, format!("/teams/{team}/members/1")),
        (M::GET, "/imagesets/".into()),
        (M::POST, "/imagesets/".into()),
        (M::GET, format!("/imagesets/{set}")),
        (M::POST, format!("/imagesets/{set}/products")),
        (M::PUT, format!("/imagesets/{set}/mode")),
        (M::POST, format!("/imagesets/{set}/remote")),
        (M::GET, "/annotationtypes/".into()),
        (M::POST, "/annotationtypes/".into()),
        (M::GET, "/annotationtypes/1".into()),
        (M::GET, "/products/".into()),
        (M::POST, "/products/".into()),
        (M::GET, "/products/1".into()),
        (M::GET, "/images/".into()),
        (M::POST, "/images/".into()),
        (M::GET, format!("/images/{image}")),
        (M::DELETE, format!("/images/{image}")),
        (M::GET, format!("/images/{image}/download")),
        (M::GET, format!("/images/{image}/thumbnail")),
        (M::GET, format!("/images/{image}/pyramid")),
        (M::GET, format!("/images/{image}/verification")),
        (M::POST, format!("/images/{image}/verification")),
        (M::GET, format!("/images/{image}/annotationtypes")),
        (M::GET, format!("/images/{image}/eiph?x1=0&y1=0&x2=10&y2=10")),
        (M::POST, format!("/images/{image}/share")),
        (M::GET, format!("/images/{image}/shares")),
        (M::POST, "/shares/revoke".into()),
        (M::GET, format!("/annotations/?image={image}")),
        (M::POST, "/annotations/".into()),
        (M::POST, "/annotations/click".into()),
        (M::GET, format!("/annotations/{annotation}")),
        (M::PATCH, format!("/annotations/{annotation}")),
        (M::DELETE, format!("/annotations/{annotation}")),
        (M::POST, format!("/annotations/{annotation}/verify")),
        (M::POST, format!("/annotations/{annotation}/media")),
        (M::GET, "/media/".into()),
        (M::GET, "/media/1".into()),
        (M::GET, "/media/1/download".into()),
        (M::GET, "/versions/".into()),
        (M::POST, "/versions/".into()),
        (M::GET, format!("/versions/{version}")),
        (M::POST, format!("/versions/{version}/artifacts")),
        (M::GET, "/artifacts/1/download".into()),
        (M::GET, format!("/export/?image_set={set}")),
        (M::GET, format!("/screening/?image={image}")),
        (M::POST, "/screening/".into()),
        (M::GET, "/screening/1".into()),
        (M::POST, "/screening/1/mark".into()),
        (M::POST, "/screening/1/position".into()),
        (M::POST, "/maps/classgrid".into()),
        (M::POST, "/maps/density".into()),
        (M::POST, "/maps/cluster".into()),
        (M::GET, "/maps/1".into()),
        (M::POST, "/maps/1/corrections".into()),
        (M::POST, "/federation/import".into()),
        (M::GET, "/no/such/endpoint".into()),
    ]
}
