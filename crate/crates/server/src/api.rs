//! REST routes under `/api/v1`.

use std::collections::BTreeSet;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, RawQuery, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use exact_core::federation::{PeerAnnotation, PeerTemplate, RemoteImageRef};
use exact_core::layout::{Correction, EmbeddedPatch, ScoredAnnotation};
use exact_core::store::{AnnotationFilter, AnnotationUpdate, NewAnnotation, PageRequest};
use exact_core::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auth::{basic_credentials, Caller, TileCaller};
use crate::dto::ImageDto;
use crate::error::{ApiError, ApiResult};
use crate::page::{window, Page};
use crate::AppState;

type JsonResult<T> = ApiResult<Json<T>>;

/// Runs a blocking instance call on the worker pool.
async fn run<T, F>(st: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Instance) -> exact_core::Result<T> + Send + 'static,
{
    let inst = st.inst.clone();
    tokio::task::spawn_blocking(move || f(&inst))
        .await
        .expect("instance call panicked")
        .map_err(Into::into)
}

fn created<T: Serialize>(v: T) -> Response {
    (StatusCode::CREATED, Json(v)).into_response()
}

/// Registers `path` (ending in `/`) with and without the trailing slash.
fn both(r: Router<AppState>, path: &str, m: axum::routing::MethodRouter<AppState>) -> Router<AppState> {
    r.route(path, m.clone()).route(path.trim_end_matches('/'), m)
}

pub(crate) async fn fallback(Caller(_): Caller) -> ApiError {
    ApiError::NotFound("no such endpoint".into())
}

pub fn routes() -> Router<AppState> {
    let mut r = Router::new();
    for (path, m) in [
        ("/users/", get(list_users).post(create_user)),
        ("/teams/", get(list_teams).post(create_team)),
        ("/imagesets/", get(list_sets).post(create_set)),
        ("/annotationtypes/", get(list_templates).post(create_template)),
        ("/products/", get(list_products).post(create_product)),
        ("/images/", get(list_images).post(upload_image)),
        ("/annotations/", get(list_annotations).post(create_annotations)),
        ("/media/", get(list_media)),
        ("/versions/", get(list_versions).post(create_version)),
        ("/export/", get(export)),
        ("/screening/", get(find_screening).post(open_screening)),
    ] {
        r = both(r, path, m);
    }
    r
        .route("/auth/token", post(login))
        .route("/users/{id}", get(get_user))
        .route("/users/{id}/deactivate", post(deactivate_user))
        .route("/teams/{id}", get(get_team))
        .route("/teams/{id}/members", get(list_members))
        .route("/teams/{id}/members/{user}", put(set_member))
        .route("/imagesets/{id}", get(get_set))
        .route("/imagesets/{id}/products", post(attach_product))
        .route("/imagesets/{id}/mode", put(set_mode))
        .route("/imagesets/{id}/remote", post(add_remote))
        .route("/annotationtypes/{id}", get(get_template))
        .route("/products/{id}", get(get_product))
        .route("/images/{id}", get(get_image).delete(delete_image))
        .route("/images/{id}/download", get(download_image))
        .route("/images/{id}/thumbnail", get(thumbnail))
        .route("/images/{id}/pyramid", get(pyramid))
        .route("/images/{id}/verification", get(image_verification).post(mark_image))
        .route("/images/{id}/annotationtypes", get(template_counts))
        .route("/images/{id}/eiph", get(eiph))
        .route("/images/{id}/share", post(share))
        .route("/images/{id}/shares", get(list_shares))
        .route("/images/{id}/{frame}/{level}/{tile}", get(tile))
        .route("/shares/revoke", post(revoke))
        .route("/annotations/click", post(single_click))
        .route(
            "/annotations/{id}",
            get(get_annotation).patch(update_annotation).delete(delete_annotation),
        )
        .route("/annotations/{id}/verify", post(verify_annotation))
        .route("/annotations/{id}/media", post(upload_media))
        .route("/media/{id}", get(get_media))
        .route("/media/{id}/download", get(download_media))
        .route("/versions/{id}", get(get_version))
        .route("/versions/{id}/artifacts", post(upload_artifact))
        .route("/artifacts/{id}/download", get(download_artifact))
        .route("/screening/{id}", get(resume_screening))
        .route("/screening/{id}/mark", post(mark_screened))
        .route("/screening/{id}/position", post(record_position))
        .route("/maps/classgrid", post(class_grid))
        .route("/maps/density", post(density_map))
        .route("/maps/cluster", post(cluster_map))
        .route("/maps/{id}", get(map_registry))
        .route("/maps/{id}/corrections", post(correct))
        .route("/federation/import", post(federation_import))
        .fallback(fallback)
        .layer(DefaultBodyLimit::disable())
}

fn path_of(p: &str) -> String {
    format!("/api/v1{p}")
}

// ---- auth and users ----

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    password: String,
}

async fn login(State(st): State<AppState>, headers: axum::http::HeaderMap, body: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let creds = basic_credentials(&headers).or_else(|| {
        serde_json::from_slice::<LoginBody>(&body)
            .ok()
            .map(|b| (b.username, b.password))
    });
    let (u, p) = creds.ok_or(Error::Unauthenticated)?;
    let token = run(&st, move |i| i.login(&u, &p)).await?;
    Ok(Json(json!({ "token": token })))
}

async fn list_users(State(st): State<AppState>, Caller(_): Caller, RawQuery(q): RawQuery) -> JsonResult<Page<User>> {
    let w = window(q.as_deref())?;
    let users = run(&st, |i| Ok(i.users())).await?;
    Ok(Json(Page::slice(users, w, &st.base_url, &path_of("/users/"), q.as_deref())))
}

#[derive(Deserialize)]
struct NewUser {
    username: String,
    password: String,
    #[serde(default)]
    is_admin: bool,
}

async fn create_user(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<NewUser>) -> ApiResult<Response> {
    let u = run(&st, move |i| i.create_user(a, &b.username, &b.password, b.is_admin)).await?;
    Ok(created(u))
}

async fn get_user(State(st): State<AppState>, Caller(_): Caller, Path(id): Path<u64>) -> JsonResult<User> {
    Ok(Json(run(&st, move |i| i.user(UserId(id))).await?))
}

async fn deactivate_user(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<User> {
    Ok(Json(run(&st, move |i| i.deactivate_user(a, UserId(id))).await?))
}

// ---- teams ----

#[derive(Deserialize)]
struct NameBody {
    name: String,
}

async fn list_teams(State(st): State<AppState>, Caller(a): Caller, RawQuery(q): RawQuery) -> JsonResult<Page<Team>> {
    let w = window(q.as_deref())?;
    let teams = run(&st, move |i| Ok(i.teams(a))).await?;
    Ok(Json(Page::slice(teams, w, &st.base_url, &path_of("/teams/"), q.as_deref())))
}

async fn create_team(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<NameBody>) -> ApiResult<Response> {
    Ok(created(run(&st, move |i| i.create_team(a, &b.name)).await?))
}

async fn get_team(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<Team> {
    let teams = run(&st, move |i| Ok(i.teams(a))).await?;
    teams
        .into_iter()
        .find(|t| t.id == TeamId(id))
        .map(Json)
        .ok_or_else(|| Error::NotFound("team", id).into())
}

async fn list_members(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<Vec<Membership>> {
    let members = run(&st, move |i| {
        i.check_permission_for(a, Right::Read, Resource::Team(TeamId(id)))?;
        Ok(i.memberships(TeamId(id)))
    })
    .await?;
    Ok(Json(members))
}

#[derive(Deserialize)]
struct RightsBody {
    rights: BTreeSet<Right>,
}

async fn set_member(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path((team, user)): Path<(u64, u64)>,
    Json(b): Json<RightsBody>,
) -> JsonResult<Option<Membership>> {
    Ok(Json(run(&st, move |i| i.set_membership(a, TeamId(team), UserId(user), b.rights)).await?))
}

// ---- image sets ----

#[derive(Deserialize)]
struct NewSet {
    team: TeamId,
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    is_virtual: bool,
}

async fn list_sets(State(st): State<AppState>, Caller(a): Caller, RawQuery(q): RawQuery) -> JsonResult<Page<ImageSet>> {
    let w = window(q.as_deref())?;
    let sets = run(&st, move |i| Ok(i.image_sets(a))).await?;
    Ok(Json(Page::slice(sets, w, &st.base_url, &path_of("/imagesets/"), q.as_deref())))
}

async fn create_set(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<NewSet>) -> ApiResult<Response> {
    let s = run(&st, move |i| i.create_image_set(a, b.team, &b.name, &b.description, b.is_virtual)).await?;
    Ok(created(s))
}

async fn get_set(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<ImageSet> {
    Ok(Json(run(&st, move |i| i.image_set(a, ImageSetId(id))).await?))
}

#[derive(Deserialize)]
struct ProductRef {
    product: ProductId,
}

async fn attach_product(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(b): Json<ProductRef>,
) -> JsonResult<ImageSet> {
    Ok(Json(run(&st, move |i| i.attach_product(a, ImageSetId(id), b.product)).await?))
}

async fn set_mode(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(mode): Json<AnnotationMode>,
) -> JsonResult<ImageSet> {
    Ok(Json(run(&st, move |i| i.set_annotation_mode(a, ImageSetId(id), mode)).await?))
}

async fn add_remote(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(r): Json<RemoteImageRef>,
) -> ApiResult<Response> {
    let img = run(&st, move |i| i.add_remote_to_virtual_set(a, ImageSetId(id), r)).await?;
    Ok(created(ImageDto::from(img)))
}

// ---- templates and products ----

async fn list_templates(State(st): State<AppState>, Caller(_): Caller, RawQuery(q): RawQuery) -> JsonResult<Page<AnnotationTemplate>> {
    let w = window(q.as_deref())?;
    let all = run(&st, |i| Ok(i.templates())).await?;
    Ok(Json(Page::slice(all, w, &st.base_url, &path_of("/annotationtypes/"), q.as_deref())))
}

async fn create_template(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<NewTemplate>) -> ApiResult<Response> {
    Ok(created(run(&st, move |i| i.create_template(a, b)).await?))
}

async fn get_template(State(st): State<AppState>, Caller(_): Caller, Path(id): Path<u64>) -> JsonResult<AnnotationTemplate> {
    Ok(Json(run(&st, move |i| i.template(TemplateId(id))).await?))
}

#[derive(Deserialize)]
struct NewProduct {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default, alias = "template_ids")]
    annotation_types: Vec<TemplateId>,
}

async fn list_products(State(st): State<AppState>, Caller(_): Caller, RawQuery(q): RawQuery) -> JsonResult<Page<Product>> {
    let w = window(q.as_deref())?;
    let all = run(&st, |i| Ok(i.products())).await?;
    Ok(Json(Page::slice(all, w, &st.base_url, &path_of("/products/"), q.as_deref())))
}

async fn create_product(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<NewProduct>) -> ApiResult<Response> {
    Ok(created(
        run(&st, move |i| i.create_product(a, &b.name, &b.description, b.annotation_types)).await?,
    ))
}

async fn get_product(State(st): State<AppState>, Caller(_): Caller, Path(id): Path<u64>) -> JsonResult<Value> {
    let (product, templates) = run(&st, move |i| {
        let p = i
            .products()
            .into_iter()
            .find(|p| p.id == ProductId(id))
            .ok_or(Error::NotFound("product", id))?;
        Ok((p, i.product_templates(ProductId(id))?))
    })
    .await?;
    let mut v = serde_json::to_value(product).expect("product serializes");
    v["annotation_types"] = serde_json::to_value(templates).expect("templates serialize");
    Ok(Json(v))
}

// ---- images ----

#[derive(Deserialize)]
struct ImageQuery {
    #[serde(alias = "image_set_id")]
    image_set: Option<u64>,
}

async fn list_images(
    State(st): State<AppState>,
    Caller(a): Caller,
    Query(f): Query<ImageQuery>,
    RawQuery(q): RawQuery,
) -> JsonResult<Page<ImageDto>> {
    let w = window(q.as_deref())?;
    let imgs = run(&st, move |i| {
        if let Some(s) = f.image_set {
            i.image_set(a, ImageSetId(s))?;
        }
        Ok(i.images(a, f.image_set.map(ImageSetId)))
    })
    .await?;
    let imgs = imgs.into_iter().map(ImageDto::from).collect();
    Ok(Json(Page::slice(imgs, w, &st.base_url, &path_of("/images/"), q.as_deref())))
}

/// Text fields and files of a multipart body.
struct Form {
    fields: std::collections::HashMap<String, String>,
    files: Vec<(String, Option<String>, Vec<u8>)>,
}

async fn read_form(mut mp: Multipart) -> ApiResult<Form> {
    let mut form = Form {
        fields: Default::default(),
        files: vec![],
    };
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::BadRequest(e.to_string());
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        match field.file_name().map(str::to_string) {
            Some(file_name) => {
                let ct = field.content_type().map(str::to_string);
                let bytes = field.bytes().await.map_err(bad)?;
                form.files.push((file_name, ct, bytes.to_vec()));
            }
            None => {
                let text = field.text().await.map_err(bad)?;
                form.fields.insert(name, text);
            }
        }
    }
    Ok(form)
}

impl Form {
    fn id(&self, names: &[&str]) -> ApiResult<u64> {
        let v = names
            .iter()
            .find_map(|n| self.fields.get(*n))
            .ok_or_else(|| ApiError::BadRequest(format!("missing field {}", names[0])))?;
        v.trim()
            .parse()
            .map_err(|_| ApiError::BadRequest(format!("{} must be an id", names[0])))
    }

    fn single_file(self) -> ApiResult<(String, Option<String>, Vec<u8>)> {
        let mut files = self.files;
        if files.len() != 1 {
            return Err(ApiError::BadRequest("exactly one file part expected".into()));
        }
        Ok(files.remove(0))
    }
}

async fn upload_image(State(st): State<AppState>, Caller(a): Caller, mp: Multipart) -> ApiResult<Response> {
    let form = read_form(mp).await?;
    let set = ImageSetId(form.id(&["image_set", "image_set_id"])?);
    let (name, _, bytes) = form.single_file()?;
    let img = run(&st, move |i| i.upload_image(a, set, &name, &bytes)).await?;
    Ok(created(ImageDto::from(img)))
}

async fn get_image(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<ImageDto> {
    Ok(Json(run(&st, move |i| i.image(a, ImageId(id))).await?.into()))
}

async fn delete_image(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> ApiResult<StatusCode> {
    run(&st, move |i| i.delete_image(a, ImageId(id))).await?;
    Ok(StatusCode::NO_CONTENT)
}

fn bytes_response(bytes: Vec<u8>, content_type: &str, download_name: Option<&str>) -> Response {
    let mut r = Response::new(Body::from(bytes));
    if let Ok(v) = HeaderValue::from_str(content_type) {
        r.headers_mut().insert(header::CONTENT_TYPE, v);
    }
    if let Some(name) = download_name {
        let safe: String = name.chars().filter(|c| c.is_ascii_graphic() && *c != '"').collect();
        if let Ok(v) = HeaderValue::from_str(&format!("attachment; filename=\"{safe}\"")) {
            r.headers_mut().insert(header::CONTENT_DISPOSITION, v);
        }
    }
    r
}

async fn download_image(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> ApiResult<Response> {
    let (img, bytes) = run(&st, move |i| Ok((i.image(a, ImageId(id))?, i.original(a, ImageId(id))?))).await?;
    Ok(bytes_response(bytes, "application/octet-stream", Some(&img.public_name)))
}

async fn thumbnail(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> ApiResult<Response> {
    let png = run(&st, move |i| i.thumbnail(a, ImageId(id), 512)).await?;
    Ok(bytes_response(png, "image/png", None))
}

async fn pyramid(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<exact_core::tiles::Pyramid> {
    Ok(Json(run(&st, move |i| i.pyramid_info(a, ImageId(id))).await?))
}

async fn image_verification(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
) -> JsonResult<exact_core::access::ImageVerification> {
    Ok(Json(
        run(&st, move |i| {
            i.image(a, ImageId(id))?;
            i.image_verified(ImageId(id))
        })
        .await?,
    ))
}

async fn mark_image(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
) -> JsonResult<exact_core::access::ImageVerification> {
    Ok(Json(run(&st, move |i| i.mark_image_verified(a, ImageId(id))).await?))
}

#[derive(Serialize)]
struct TemplateCount {
    annotation_type: TemplateId,
    count: usize,
}

async fn template_counts(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<Vec<TemplateCount>> {
    let counts = run(&st, move |i| i.template_counts(a, ImageId(id))).await?;
    Ok(Json(
        counts
            .into_iter()
            .map(|(annotation_type, count)| TemplateCount { annotation_type, count })
            .collect(),
    ))
}

#[derive(Deserialize)]
struct Viewport {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

async fn eiph(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>, Query(v): Query<Viewport>) -> JsonResult<Value> {
    let score = run(&st, move |i| i.eiph_score(a, ImageId(id), Rect::new(v.x1, v.y1, v.x2, v.y2))).await?;
    Ok(Json(json!({ "score": score })))
}

#[derive(Deserialize)]
struct ShareBody {
    peer: String,
}

async fn share(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>, Json(b): Json<ShareBody>) -> ApiResult<Response> {
    let (_, r) = run(&st, move |i| i.share_image(a, ImageId(id), &b.peer)).await?;
    Ok(created(r))
}

async fn list_shares(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
) -> JsonResult<Vec<exact_core::federation::ShareGrant>> {
    Ok(Json(run(&st, move |i| i.shares(a, ImageId(id))).await?))
}

#[derive(Deserialize)]
struct TokenBody {
    token: String,
}

async fn revoke(
    State(st): State<AppState>,
    Caller(a): Caller,
    Json(b): Json<TokenBody>,
) -> JsonResult<exact_core::federation::ShareGrant> {
    Ok(Json(run(&st, move |i| i.revoke_share(a, &b.token)).await?))
}

/// `{col}_{row}.{fmt}`
fn parse_tile_name(name: &str) -> Option<(u32, u32, TileFormat)> {
    let (stem, ext) = name.rsplit_once('.')?;
    let (c, r) = stem.split_once('_')?;
    Some((c.parse().ok()?, r.parse().ok()?, TileFormat::from_extension(ext)?))
}

#[derive(Deserialize)]
struct TileQuery {
    #[serde(default)]
    proxy: bool,
}

async fn tile(
    State(st): State<AppState>,
    caller: TileCaller,
    Path((id, frame, level, name)): Path<(u64, u32, u32, String)>,
    Query(tq): Query<TileQuery>,
) -> ApiResult<Response> {
    let (col, row, format) =
        parse_tile_name(&name).ok_or_else(|| ApiError::NotFound(format!("no tile named {name:?}")))?;
    let image_id = ImageId(id);
    let addr = TileAddress {
        image_id,
        frame,
        level,
        col,
        row,
        format,
    };
    let actor = match caller {
        TileCaller::Scoped(token) => {
            let tile = run(&st, move |i| {
                i.authorize_scoped(&token, image_id)?;
                i.get_tile(Actor::System, addr)
            })
            .await?;
            return Ok(tile_response(tile.bytes, tile.content_type));
        }
        TileCaller::User(a) => a,
    };
    let img = run(&st, move |i| i.image(actor, image_id)).await?;
    let Some(remote) = img.remote else {
        let tile = run(&st, move |i| i.get_tile(actor, addr)).await?;
        return Ok(tile_response(tile.bytes, tile.content_type));
    };
    let grid_ok = exact_core::tiles::level_dimensions(img.width, img.height, level)
        .map(|(w, h)| exact_core::tiles::tile_grid(w, h))
        .is_ok_and(|(c, r)| col < c && row < r && frame < img.frame_count);
    if !grid_ok {
        return Err(Error::Tile(exact_core::tiles::TileError::TileOutOfRange).into());
    }
    let url = format!(
        "{}/api/v1/images/{}/{frame}/{level}/{name}?{}",
        remote.instance_base_url,
        remote.remote_image_id,
        url::form_urlencoded::Serializer::new(String::new())
            .append_pair("token", &remote.scoped_token)
            .finish()
    );
    if !tq.proxy {
        return Ok(Redirect::temporary(&url).into_response());
    }
    match st.peers.tile(&remote.instance_base_url, &url).await {
        Ok((bytes, ct)) => Ok(tile_response(bytes, &ct)),
        Err(crate::error::PeerError::AuthFailure(_)) => Err(Error::TokenRevoked.into()),
        Err(crate::error::PeerError::Status(_, 404)) => {
            Err(Error::Tile(exact_core::tiles::TileError::TileOutOfRange).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn tile_response(bytes: Vec<u8>, content_type: &str) -> Response {
    let mut r = bytes_response(bytes, content_type, None);
    r.headers_mut().insert(
        header::CACHE_CONTROL,
        HeaderValue::from_static("public, max-age=31536000, immutable"),
    );
    r
}

// ---- annotations ----

#[derive(Deserialize, Default)]
struct AnnotationQuery {
    #[serde(alias = "image_id")]
    image: Option<u64>,
    #[serde(alias = "image_set_id")]
    image_set: Option<u64>,
    /// Template id or name.
    #[serde(alias = "template", alias = "template_id")]
    annotation_type: Option<String>,
    #[serde(alias = "creator_id")]
    creator: Option<u64>,
    verified: Option<bool>,
    x1: Option<f64>,
    y1: Option<f64>,
    x2: Option<f64>,
    y2: Option<f64>,
}

fn annotation_filter(i: &Instance, q: AnnotationQuery) -> exact_core::Result<Option<AnnotationFilter>> {
    let window = match (q.x1, q.y1, q.x2, q.y2) {
        (Some(x1), Some(y1), Some(x2), Some(y2)) => Some(Rect::new(x1, y1, x2, y2)),
        (None, None, None, None) => None,
        _ => return Err(Error::BadFilter("a window needs x1, y1, x2 and y2".into())),
    };
    let template_id = match q.annotation_type {
        None => None,
        Some(t) => match t.parse::<u64>() {
            Ok(id) => Some(TemplateId(id)),
            Err(_) => match i.templates().into_iter().find(|x| x.name == t) {
                Some(x) => Some(x.id),
                None => return Ok(None),
            },
        },
    };
    Ok(Some(AnnotationFilter {
        image_id: q.image.map(ImageId),
        image_set_id: q.image_set.map(ImageSetId),
        template_id,
        window,
        creator: q.creator.map(UserId),
        verified: q.verified,
    }))
}

async fn list_annotations(
    State(st): State<AppState>,
    Caller(a): Caller,
    Query(f): Query<AnnotationQuery>,
    RawQuery(q): RawQuery,
) -> JsonResult<Page<AnnotationRecord>> {
    let w = window(q.as_deref())?;
    let page = run(&st, move |i| match annotation_filter(i, f)? {
        Some(filter) => i.query_annotations(a, &filter, PageRequest { limit: w.limit, offset: w.offset }),
        None => Ok(exact_core::store::QueryPage { count: 0, results: vec![] }),
    })
    .await?;
    Ok(Json(Page::new(
        page.results,
        page.count,
        w,
        &st.base_url,
        &path_of("/annotations/"),
        q.as_deref(),
    )))
}

/// A single annotation object or an array of them (imported atomically).
async fn create_annotations(State(st): State<AppState>, Caller(a): Caller, Json(body): Json<Value>) -> ApiResult<Response> {
    let bad = |e: serde_json::Error| ApiError::BadRequest(e.to_string());
    if body.is_array() {
        let batch: Vec<NewAnnotation> = serde_json::from_value(body).map_err(bad)?;
        Ok(created(run(&st, move |i| i.import_precomputed(a, batch)).await?))
    } else {
        let new: NewAnnotation = serde_json::from_value(body).map_err(bad)?;
        Ok(created(run(&st, move |i| i.create_annotation(a, new)).await?))
    }
}

#[derive(Deserialize)]
struct ClickBody {
    #[serde(alias = "image_id")]
    image: ImageId,
    #[serde(alias = "template_id")]
    annotation_type: TemplateId,
    x: f64,
    y: f64,
}

async fn single_click(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<ClickBody>) -> ApiResult<Response> {
    Ok(created(
        run(&st, move |i| i.create_single_click(a, b.image, b.annotation_type, b.x, b.y)).await?,
    ))
}

async fn get_annotation(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<AnnotationRecord> {
    Ok(Json(run(&st, move |i| i.annotation(a, AnnotationId(id))).await?))
}

async fn update_annotation(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(u): Json<AnnotationUpdate>,
) -> JsonResult<AnnotationRecord> {
    Ok(Json(run(&st, move |i| i.update_annotation(a, AnnotationId(id), u)).await?))
}

async fn delete_annotation(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<AnnotationRecord> {
    Ok(Json(run(&st, move |i| i.delete_annotation(a, AnnotationId(id))).await?))
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: Verdict,
}

async fn verify_annotation(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(b): Json<VerdictBody>,
) -> JsonResult<Value> {
    let v = run(&st, move |i| i.verify_annotation(a, AnnotationId(id), b.verdict)).await?;
    Ok(Json(json!({ "verifications": v })))
}

// ---- media ----

async fn upload_media(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>, mp: Multipart) -> ApiResult<Response> {
    let (name, ct, bytes) = read_form(mp).await?.single_file()?;
    let ct = ct.unwrap_or_else(|| "application/octet-stream".into());
    Ok(created(
        run(&st, move |i| i.attach_media(a, AnnotationId(id), &name, &ct, &bytes)).await?,
    ))
}

#[derive(Deserialize)]
struct MediaQuery {
    #[serde(alias = "annotation_id")]
    annotation: Option<u64>,
}

async fn list_media(
    State(st): State<AppState>,
    Caller(a): Caller,
    Query(f): Query<MediaQuery>,
    RawQuery(q): RawQuery,
) -> JsonResult<Page<exact_core::store::MediaAttachment>> {
    let w = window(q.as_deref())?;
    let all = run(&st, move |i| Ok(i.media_list(a, f.annotation.map(AnnotationId)))).await?;
    Ok(Json(Page::slice(all, w, &st.base_url, &path_of("/media/"), q.as_deref())))
}

async fn get_media(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
) -> JsonResult<exact_core::store::MediaAttachment> {
    Ok(Json(run(&st, move |i| i.media(a, MediaId(id))).await?.0))
}

async fn download_media(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> ApiResult<Response> {
    let (m, bytes) = run(&st, move |i| i.media(a, MediaId(id))).await?;
    Ok(bytes_response(bytes, &m.mime_type, Some(&m.name)))
}

// ---- versions ----

#[derive(Deserialize)]
struct SetQuery {
    #[serde(alias = "image_set_id")]
    image_set: Option<u64>,
}

async fn list_versions(
    State(st): State<AppState>,
    Caller(a): Caller,
    Query(f): Query<SetQuery>,
    RawQuery(q): RawQuery,
) -> JsonResult<Page<exact_core::store::Version>> {
    let w = window(q.as_deref())?;
    let all = run(&st, move |i| Ok(i.versions(a, f.image_set.map(ImageSetId)))).await?;
    Ok(Json(Page::slice(all, w, &st.base_url, &path_of("/versions/"), q.as_deref())))
}

#[derive(Deserialize)]
struct NewVersion {
    #[serde(alias = "image_set_id")]
    image_set: ImageSetId,
    name: String,
    description: Option<String>,
}

async fn create_version(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<NewVersion>) -> ApiResult<Response> {
    Ok(created(
        run(&st, move |i| i.create_version(a, b.image_set, &b.name, b.description.as_deref())).await?,
    ))
}

async fn get_version(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> JsonResult<exact_core::store::Version> {
    Ok(Json(run(&st, move |i| i.version(a, VersionId(id))).await?))
}

async fn upload_artifact(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>, mp: Multipart) -> ApiResult<Response> {
    let (name, ct, bytes) = read_form(mp).await?.single_file()?;
    let ct = ct.unwrap_or_else(|| "application/octet-stream".into());
    Ok(created(
        run(&st, move |i| i.attach_artifact(a, VersionId(id), &name, &ct, &bytes)).await?,
    ))
}

async fn download_artifact(State(st): State<AppState>, Caller(a): Caller, Path(id): Path<u64>) -> ApiResult<Response> {
    let (m, bytes) = run(&st, move |i| i.artifact(a, ArtifactId(id))).await?;
    Ok(bytes_response(bytes, &m.mime_type, Some(&m.name)))
}

pub const DEFAULT_EXPORT_TEMPLATE: &str = "{id}\t{public_name}\t{template_name}\t{vector}";

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(alias = "image_set_id")]
    image_set: u64,
    version: Option<u64>,
    template: Option<String>,
}

async fn export(State(st): State<AppState>, Caller(a): Caller, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let text = run(&st, move |i| {
        i.export_annotations(
            a,
            ImageSetId(q.image_set),
            q.version.map(VersionId),
            q.template.as_deref().unwrap_or(DEFAULT_EXPORT_TEMPLATE),
        )
    })
    .await?;
    Ok(bytes_response(text.into_bytes(), "text/plain; charset=utf-8", None))
}

// ---- screening ----

#[derive(Deserialize)]
struct OpenScreening {
    #[serde(alias = "image_id")]
    image: ImageId,
    patch_w: u32,
    patch_h: u32,
}

async fn open_screening(
    State(st): State<AppState>,
    Caller(a): Caller,
    Json(b): Json<OpenScreening>,
) -> JsonResult<exact_core::screening::ScreeningState> {
    Ok(Json(
        run(&st, move |i| Ok(i.open_screening_map(a, b.image, b.patch_w, b.patch_h)?.state())).await?,
    ))
}

#[derive(Deserialize)]
struct ScreeningQuery {
    #[serde(alias = "image_id")]
    image: u64,
}

async fn find_screening(
    State(st): State<AppState>,
    Caller(a): Caller,
    Query(q): Query<ScreeningQuery>,
) -> JsonResult<exact_core::screening::ScreeningState> {
    Ok(Json(run(&st, move |i| Ok(i.screening_map_for(a, ImageId(q.image))?.state())).await?))
}

async fn resume_screening(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
) -> JsonResult<exact_core::screening::ScreeningState> {
    Ok(Json(run(&st, move |i| i.resume(a, ScreeningMapId(id))).await?))
}

#[derive(Deserialize)]
struct Cell {
    col: u32,
    row: u32,
}

async fn mark_screened(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(c): Json<Cell>,
) -> JsonResult<exact_core::screening::ScreeningState> {
    Ok(Json(
        run(&st, move |i| Ok(i.mark_screened(a, ScreeningMapId(id), c.col, c.row)?.0.state())).await?,
    ))
}

async fn record_position(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(c): Json<Cell>,
) -> JsonResult<exact_core::screening::ScreeningState> {
    Ok(Json(
        run(&st, move |i| {
            i.record_position(a, ScreeningMapId(id), c.col, c.row)?;
            i.resume(a, ScreeningMapId(id))
        })
        .await?,
    ))
}

// ---- maps ----

#[derive(Serialize)]
struct BuiltMap {
    image: ImageDto,
    registry: exact_core::layout::MapRegistry,
}

fn built((img, registry): (ImageRecord, exact_core::layout::MapRegistry)) -> Response {
    created(BuiltMap {
        image: img.into(),
        registry,
    })
}

#[derive(Deserialize)]
struct ClassGridBody {
    #[serde(alias = "image_set_id")]
    image_set: ImageSetId,
    #[serde(alias = "template_id")]
    annotation_type: TemplateId,
    cell_size: u32,
    target_set: ImageSetId,
}

async fn class_grid(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<ClassGridBody>) -> ApiResult<Response> {
    Ok(built(
        run(&st, move |i| i.build_class_grid(a, b.image_set, b.annotation_type, b.cell_size, b.target_set)).await?,
    ))
}

#[derive(Deserialize)]
struct DensityEntry {
    annotation_id: AnnotationId,
    score: Option<f64>,
}

#[derive(Deserialize)]
struct DensityBody {
    annotations: Vec<DensityEntry>,
    bin_width: f64,
    cell_size: u32,
    target_set: ImageSetId,
}

async fn density_map(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<DensityBody>) -> ApiResult<Response> {
    Ok(built(
        run(&st, move |i| {
            let scored = b
                .annotations
                .into_iter()
                .map(|e| {
                    let score = match e.score {
                        Some(s) => s,
                        None => i
                            .annotation(a, e.annotation_id)?
                            .meta
                            .get("score")
                            .and_then(Value::as_f64)
                            .ok_or_else(|| {
                                Error::InvalidInput(format!("annotation {} has no score", e.annotation_id))
                            })?,
                    };
                    Ok(ScoredAnnotation {
                        annotation_id: e.annotation_id,
                        score,
                    })
                })
                .collect::<exact_core::Result<Vec<_>>>()?;
            i.build_density_map(a, &scored, b.bin_width, b.cell_size, b.target_set)
        })
        .await?,
    ))
}

#[derive(Deserialize)]
struct ClusterBody {
    patches: Vec<EmbeddedPatch>,
    canvas_w: u32,
    canvas_h: u32,
    cell_size: u32,
    target_set: ImageSetId,
}

async fn cluster_map(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<ClusterBody>) -> ApiResult<Response> {
    Ok(built(
        run(&st, move |i| i.build_cluster_map(a, &b.patches, b.canvas_w, b.canvas_h, b.cell_size, b.target_set)).await?,
    ))
}

async fn map_registry(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
) -> JsonResult<exact_core::layout::MapRegistry> {
    Ok(Json(run(&st, move |i| i.map_registry(a, ImageId(id))).await?))
}

#[derive(Deserialize)]
struct CorrectionBody {
    col: u32,
    row: u32,
    #[serde(flatten)]
    correction: Correction,
}

async fn correct(
    State(st): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<u64>,
    Json(b): Json<CorrectionBody>,
) -> JsonResult<AnnotationRecord> {
    Ok(Json(
        run(&st, move |i| i.sync_correction(a, ImageId(id), b.col, b.row, b.correction)).await?,
    ))
}

// ---- federation ----

#[derive(Deserialize)]
struct ImportBody {
    /// Base URL of the owning instance.
    peer: String,
    username: String,
    password: String,
    remote_image_set: ImageSetId,
    /// Local virtual set holding the shared images.
    image_set: ImageSetId,
}

#[derive(Serialize, Default)]
struct ImportSummary {
    images: usize,
    skipped_images: usize,
    created: usize,
    updated: usize,
    unchanged: usize,
    deleted: usize,
}

async fn federation_import(State(st): State<AppState>, Caller(a): Caller, Json(b): Json<ImportBody>) -> JsonResult<ImportSummary> {
    let peer = b.peer.trim_end_matches('/').to_string();
    let set = run(&st, move |i| i.image_set(a, b.image_set)).await?;
    if !set.is_virtual {
        return Err(Error::NotVirtual(set.id.0).into());
    }
    let _guard = st
        .imports
        .begin(&peer, set.id)
        .ok_or_else(|| Error::Conflict("an import for this peer and set is already running".into()))?;
    let local: Vec<(ImageId, ImageId)> = {
        let peer = peer.clone();
        run(&st, move |i| {
            Ok(i.images(a, Some(set.id))
                .into_iter()
                .filter_map(|img| {
                    let r = img.remote?;
                    (r.instance_base_url == peer).then_some((r.remote_image_id, img.id))
                })
                .collect())
        })
        .await?
    };
    let token = st.peers.login(&peer, &b.username, &b.password).await?;
    let templates: std::collections::HashMap<TemplateId, AnnotationTemplate> = st
        .peers
        .templates(&peer, &token)
        .await?
        .into_iter()
        .map(|t| (t.id, t))
        .collect();
    let remote_images = st.peers.images(&peer, &token, b.remote_image_set).await?;
    let mut summary = ImportSummary::default();
    for img in remote_images {
        let Some(&(_, local_id)) = local.iter().find(|(r, _)| *r == img.id) else {
            summary.skipped_images += 1;
            continue;
        };
        let annotations = st
            .peers
            .annotations(&peer, &token, img.id)
            .await?
            .into_iter()
            .map(|r| {
                let t = templates.get(&r.template_id).ok_or_else(|| {
                    crate::error::PeerError::Payload(peer.clone(), format!("unknown template {}", r.template_id))
                })?;
                Ok(PeerAnnotation {
                    id: r.id,
                    template: PeerTemplate {
                        name: t.name.clone(),
                        vector_kind: t.vector_kind,
                        color: Some(t.color.clone()),
                    },
                    vector: r.vector,
                    meta: r.meta,
                    deleted: r.deleted,
                })
            })
            .collect::<Result<Vec<_>, crate::error::PeerError>>()?;
        let peer = peer.clone();
        let rep = run(&st, move |i| i.import_peer_annotations(a, local_id, &peer, annotations)).await?;
        summary.images += 1;
        summary.created += rep.created;
        summary.updated += rep.updated;
        summary.unchanged += rep.unchanged;
        summary.deleted += rep.deleted;
    }
    Ok(Json(summary))
}
