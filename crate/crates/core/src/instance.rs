//! The annotation server state: tables, tile storage and file blobs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use image::RgbaImage;
use parking_lot::RwLock;
use serde::Deserialize;

use crate::access::{Actor, Resource, Right};
use crate::db::{Db, Row, Tables};
use crate::error::{Error, Result};
use crate::ids::*;
use crate::model::{
    is_hex_color, pseudonymize_name, AnnotationMode, AnnotationTemplate, ImageRecord, ImageSet, Product,
    VectorKind,
};
use crate::tiles::{decode_raster, encode_png, level_dimensions, max_level, Pyramid, Tile, TileAddress, TileStore, TILE_SIZE};

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct InstanceConfig {
    /// Tiles, originals, blobs and registry sidecars live below this.
    pub storage_root: PathBuf,
    /// Journal file. `None` keeps all tables in memory.
    pub db_path: Option<PathBuf>,
    /// Public base URL used when handing image references to peers.
    pub base_url: String,
}

impl InstanceConfig {
    pub fn new(storage_root: impl Into<PathBuf>) -> Self {
        let storage_root = storage_root.into();
        Self {
            db_path: Some(storage_root.join("exact.journal")),
            storage_root,
            base_url: "http://localhost:8000".into(),
        }
    }
}

pub struct Instance {
    pub(crate) db: RwLock<Db>,
    pub(crate) tiles: TileStore,
    root: PathBuf,
    base_url: String,
    clock: Clock,
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Instance")
            .field("root", &self.root)
            .field("base_url", &self.base_url)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct NewTemplate {
    pub name: String,
    pub vector_kind: VectorKind,
    #[serde(default = "default_color")]
    pub color: String,
    #[serde(default)]
    pub shortcut: Option<char>,
    #[serde(default)]
    pub sort_order: i32,
    #[serde(default)]
    pub default_width: Option<u32>,
    #[serde(default)]
    pub default_height: Option<u32>,
    #[serde(default)]
    pub example_image_ref: Option<String>,
}

fn default_color() -> String {
    "#ff0000".into()
}

impl NewTemplate {
    pub fn new(name: &str, vector_kind: VectorKind) -> Self {
        Self {
            name: name.into(),
            vector_kind,
            color: default_color(),
            shortcut: None,
            sort_order: 0,
            default_width: None,
            default_height: None,
            example_image_ref: None,
        }
    }

    pub fn with_default_size(mut self, w: u32, h: u32) -> Self {
        self.default_width = Some(w);
        self.default_height = Some(h);
        self
    }

    pub fn with_shortcut(mut self, key: char) -> Self {
        self.shortcut = Some(key);
        self
    }
}

impl Instance {
    pub fn open(config: InstanceConfig) -> Result<Self> {
        fs::create_dir_all(&config.storage_root)?;
        let db = match &config.db_path {
            Some(p) => Db::open(p)?,
            None => Db::in_memory(),
        };
        let tiles = TileStore::new(config.storage_root.join("tiles"))?;
        Ok(Self {
            db: RwLock::new(db),
            tiles,
            root: config.storage_root,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            clock: Arc::new(Utc::now),
        })
    }

    /// Replaces the wall clock, e.g. for reproducible public names.
    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub(crate) fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn storage_root(&self) -> &Path {
        &self.root
    }

    pub fn tiles(&self) -> &TileStore {
        &self.tiles
    }

    pub(crate) fn blob_path(&self, key: &str) -> PathBuf {
        self.root.join("blobs").join(key)
    }

    pub(crate) fn store_blob(&self, bytes: &[u8]) -> Result<String> {
        let key = crate::access::random_token();
        let path = self.blob_path(&key);
        fs::create_dir_all(path.parent().expect("blob dir"))?;
        fs::write(path, bytes)?;
        Ok(key)
    }

    pub(crate) fn read_blob(&self, key: &str) -> Result<Vec<u8>> {
        Ok(fs::read(self.blob_path(key))?)
    }

    fn original_path(&self, id: ImageId) -> PathBuf {
        self.root.join("originals").join(id.to_string())
    }

    pub fn check_permission_for(&self, actor: Actor, action: Right, resource: Resource) -> Result<()> {
        self.db.read().tables.require(actor, action, resource)
    }

    // ---- image sets ----

    pub fn create_image_set(
        &self,
        actor: Actor,
        team_id: TeamId,
        name: &str,
        description: &str,
        is_virtual: bool,
    ) -> Result<ImageSet> {
        let mut db = self.db.write();
        if !db.tables.teams.contains_key(&team_id) {
            return Err(Error::NotFound("team", team_id.0));
        }
        if !db.tables.is_admin(actor) {
            db.tables.require(actor, Right::Manage, Resource::Team(team_id))?;
        }
        let set = ImageSet {
            id: ImageSetId(db.tables.next.image_set + 1),
            name: name.into(),
            team_id,
            description: description.into(),
            product_ids: vec![],
            image_ids: vec![],
            is_virtual,
            mode: AnnotationMode::Cooperative,
        };
        db.commit(vec![Row::ImageSet(set.clone())])?;
        Ok(set)
    }

    pub fn image_set(&self, actor: Actor, id: ImageSetId) -> Result<ImageSet> {
        let db = self.db.read();
        let set = db
            .tables
            .image_sets
            .get(&id)
            .ok_or(Error::NotFound("image set", id.0))?;
        db.tables.require(actor, Right::Read, Resource::ImageSet(id))?;
        Ok(set.clone())
    }

    pub fn image_sets(&self, actor: Actor) -> Vec<ImageSet> {
        let db = self.db.read();
        let t = &db.tables;
        t.image_sets
            .values()
            .filter(|s| t.require(actor, Right::Read, Resource::ImageSet(s.id)).is_ok())
            .cloned()
            .collect()
    }

    fn update_set(
        &self,
        actor: Actor,
        id: ImageSetId,
        f: impl FnOnce(&Tables, &mut ImageSet) -> Result<()>,
    ) -> Result<ImageSet> {
        let mut db = self.db.write();
        let mut set = db
            .tables
            .image_sets
            .get(&id)
            .cloned()
            .ok_or(Error::NotFound("image set", id.0))?;
        db.tables.require(actor, Right::Manage, Resource::ImageSet(id))?;
        f(&db.tables, &mut set)?;
        db.commit(vec![Row::ImageSet(set.clone())])?;
        Ok(set)
    }

    pub fn attach_product(&self, actor: Actor, set: ImageSetId, product: ProductId) -> Result<ImageSet> {
        self.update_set(actor, set, |t, s| {
            if !t.products.contains_key(&product) {
                return Err(Error::NotFound("product", product.0));
            }
            if !s.product_ids.contains(&product) {
                s.product_ids.push(product);
            }
            Ok(())
        })
    }

    pub fn set_annotation_mode(&self, actor: Actor, set: ImageSetId, mode: AnnotationMode) -> Result<ImageSet> {
        if let AnnotationMode::SecondOpinion {
            required_verifications: 0,
        } = mode
        {
            return Err(Error::InvalidInput("required_verifications must be >= 1".into()));
        }
        self.update_set(actor, set, |_, s| {
            s.mode = mode;
            Ok(())
        })
    }

    // ---- templates and products ----

    fn may_edit_schema(t: &Tables, actor: Actor) -> bool {
        t.is_admin(actor)
            || actor.user().is_some_and(|u| {
                t.memberships
                    .values()
                    .any(|m| m.user_id == u && m.rights.contains(&Right::Manage))
                    && t.users.get(&u).is_some_and(|u| u.active)
            })
    }

    pub fn create_template(&self, actor: Actor, new: NewTemplate) -> Result<AnnotationTemplate> {
        let mut db = self.db.write();
        if !Self::may_edit_schema(&db.tables, actor) {
            return Err(Error::PermissionDenied);
        }
        if !is_hex_color(&new.color) {
            return Err(Error::InvalidInput(format!("color {:?} is not #rrggbb", new.color)));
        }
        if new.name.is_empty() {
            return Err(Error::InvalidInput("template name is empty".into()));
        }
        let t = AnnotationTemplate {
            id: TemplateId(db.tables.next.template + 1),
            name: new.name,
            vector_kind: new.vector_kind,
            color: new.color.to_ascii_lowercase(),
            shortcut: new.shortcut,
            sort_order: new.sort_order,
            default_width: new.default_width,
            default_height: new.default_height,
            example_image_ref: new.example_image_ref,
        };
        db.commit(vec![Row::Template(t.clone())])?;
        Ok(t)
    }

    pub fn template(&self, id: TemplateId) -> Result<AnnotationTemplate> {
        self.db
            .read()
            .tables
            .templates
            .get(&id)
            .cloned()
            .ok_or(Error::NotFound("annotation template", id.0))
    }

    pub fn templates(&self) -> Vec<AnnotationTemplate> {
        self.db.read().tables.templates.values().cloned().collect()
    }

    pub fn create_product(
        &self,
        actor: Actor,
        name: &str,
        description: &str,
        template_ids: Vec<TemplateId>,
    ) -> Result<Product> {
        let mut db = self.db.write();
        let t = &db.tables;
        if !Self::may_edit_schema(t, actor) {
            return Err(Error::PermissionDenied);
        }
        let mut shortcuts = std::collections::HashSet::new();
        for (i, id) in template_ids.iter().enumerate() {
            let tpl = t
                .templates
                .get(id)
                .ok_or(Error::NotFound("annotation template", id.0))?;
            if template_ids[..i].contains(id) {
                return Err(Error::InvalidInput(format!("template {id} listed twice")));
            }
            if let Some(key) = tpl.shortcut {
                if !shortcuts.insert(key) {
                    return Err(Error::Conflict(format!("shortcut {key:?} used twice in product")));
                }
            }
        }
        let p = Product {
            id: ProductId(db.tables.next.product + 1),
            name: name.into(),
            description: description.into(),
            template_ids,
        };
        db.commit(vec![Row::Product(p.clone())])?;
        Ok(p)
    }

    pub fn products(&self) -> Vec<Product> {
        self.db.read().tables.products.values().cloned().collect()
    }

    /// Templates of a product ordered by `sort_order`, then id.
    pub fn product_templates(&self, id: ProductId) -> Result<Vec<AnnotationTemplate>> {
        let db = self.db.read();
        let p = db
            .tables
            .products
            .get(&id)
            .ok_or(Error::NotFound("product", id.0))?;
        let mut out: Vec<_> = p
            .template_ids
            .iter()
            .filter_map(|t| db.tables.templates.get(t).cloned())
            .collect();
        out.sort_by_key(|t| (t.sort_order, t.id));
        Ok(out)
    }

    // ---- images ----

    /// Decodes an upload, builds its pyramid and registers it under a
    /// pseudonymized public name.
    pub fn upload_image(&self, actor: Actor, set: ImageSetId, file_name: &str, bytes: &[u8]) -> Result<ImageRecord> {
        self.check_upload(actor, set)?;
        let frames = decode_raster(bytes, file_name)?;
        self.register_frames(actor, set, file_name, &frames, Some(bytes))
    }

    /// Registers a sequence of equally sized frames (video, z-stack) as one image.
    pub fn ingest_frames(
        &self,
        actor: Actor,
        set: ImageSetId,
        file_name: &str,
        frames: &[RgbaImage],
    ) -> Result<ImageRecord> {
        self.check_upload(actor, set)?;
        self.register_frames(actor, set, file_name, frames, None)
    }

    pub(crate) fn check_upload(&self, actor: Actor, set: ImageSetId) -> Result<()> {
        let db = self.db.read();
        if !db.tables.image_sets.contains_key(&set) {
            return Err(Error::NotFound("image set", set.0));
        }
        db.tables.require(actor, Right::Create, Resource::ImageSet(set))
    }

    pub(crate) fn register_frames(
        &self,
        actor: Actor,
        set: ImageSetId,
        file_name: &str,
        frames: &[RgbaImage],
        original: Option<&[u8]>,
    ) -> Result<ImageRecord> {
        if file_name.is_empty() {
            return Err(Error::InvalidInput("file name is empty".into()));
        }
        let id = {
            let mut db = self.db.write();
            db.tables.next.image += 1;
            ImageId(db.tables.next.image)
        };
        let pyramid = self.tiles.ingest_frames(id, frames)?;
        let stored_original = match original {
            Some(bytes) => {
                let path = self.original_path(id);
                fs::create_dir_all(path.parent().expect("originals dir"))?;
                fs::write(&path, bytes)?;
                true
            }
            None => false,
        };
        let now = self.now();
        let record = ImageRecord {
            id,
            private_name: Some(file_name.to_string()),
            public_name: pseudonymize_name(file_name, now.naive_utc()),
            width: pyramid.width,
            height: pyramid.height,
            frame_count: pyramid.frame_count,
            image_set_id: set,
            owner_instance: None,
            remote: None,
            created_at: now,
        };
        let mut db = self.db.write();
        let committed = (|| {
            let mut s = db
                .tables
                .image_sets
                .get(&set)
                .cloned()
                .ok_or(Error::NotFound("image set", set.0))?;
            db.tables.require(actor, Right::Create, Resource::ImageSet(set))?;
            s.image_ids.push(id);
            db.commit(vec![Row::Image(record.clone()), Row::ImageSet(s)])?;
            Ok(())
        })();
        if let Err(e) = committed {
            let _ = self.tiles.remove(id);
            if stored_original {
                let _ = fs::remove_file(self.original_path(id));
            }
            return Err(e);
        }
        Ok(record)
    }

    pub fn image(&self, actor: Actor, id: ImageId) -> Result<ImageRecord> {
        let db = self.db.read();
        let img = db.tables.images.get(&id).ok_or(Error::NotFound("image", id.0))?;
        db.tables.require(actor, Right::Read, Resource::Image(id))?;
        Ok(img.clone())
    }

    pub fn images(&self, actor: Actor, set: Option<ImageSetId>) -> Vec<ImageRecord> {
        let db = self.db.read();
        let t = &db.tables;
        t.images
            .values()
            .filter(|i| set.is_none_or(|s| i.image_set_id == s))
            .filter(|i| t.require(actor, Right::Read, Resource::Image(i.id)).is_ok())
            .cloned()
            .collect()
    }

    pub fn get_tile(&self, actor: Actor, addr: TileAddress) -> Result<Tile> {
        let img = self.image(actor, addr.image_id)?;
        if !img.is_local() {
            return Err(Error::InvalidInput("tiles of remote images are served by their owner".into()));
        }
        Ok(self.tiles.get_tile(addr)?)
    }

    /// Level layout of an image. Remote images report the layout their
    /// owner serves.
    pub fn pyramid_info(&self, actor: Actor, id: ImageId) -> Result<Pyramid> {
        let img = self.image(actor, id)?;
        if img.is_local() {
            return Ok((*self.tiles.pyramid(id)?).clone());
        }
        let top = max_level(img.width, img.height);
        Ok(Pyramid {
            image_id: id,
            width: img.width,
            height: img.height,
            frame_count: img.frame_count,
            max_level: top,
            tile_size: TILE_SIZE,
            level_dims: (0..=top)
                .map(|l| level_dimensions(img.width, img.height, l))
                .collect::<std::result::Result<_, _>>()?,
        })
    }

    /// PNG of the largest pyramid level whose long side is at most `max_side`.
    pub fn thumbnail(&self, actor: Actor, id: ImageId, max_side: u32) -> Result<Vec<u8>> {
        let img = self.image(actor, id)?;
        if !img.is_local() {
            return Err(Error::InvalidInput("thumbnails of remote images are served by their owner".into()));
        }
        let p = self.tiles.pyramid(id)?;
        let level = (0..=p.max_level)
            .rev()
            .find(|&l| p.level_dims[l as usize].0.max(p.level_dims[l as usize].1) <= max_side.max(1))
            .unwrap_or(0);
        let (w, h) = p.level_dims[level as usize];
        Ok(encode_png(&self.tiles.read_region(id, 0, level, (0, 0, w, h))?)?)
    }

    /// The uploaded file as received.
    pub fn original(&self, actor: Actor, id: ImageId) -> Result<Vec<u8>> {
        self.image(actor, id)?;
        fs::read(self.original_path(id)).map_err(|_| Error::NotFound("original file", id.0))
    }

    /// Removes an image with all of its annotations. Version snapshots drop
    /// their entries for the image too.
    pub fn delete_image(&self, actor: Actor, id: ImageId) -> Result<()> {
        let mut db = self.db.write();
        let t = &db.tables;
        let img = t.images.get(&id).ok_or(Error::NotFound("image", id.0))?.clone();
        t.require(actor, Right::Delete, Resource::Image(id))?;
        let mut rows = Vec::new();
        for aid in t.by_image.get(&id).into_iter().flatten() {
            let a = &t.annotations[aid];
            rows.extend(a.media_ids.iter().map(|m| Row::MediaRemoved(*m)));
            rows.push(Row::AnnotationRemoved(*aid));
        }
        for v in t.versions.values() {
            if v.image_list.contains(&id) || v.snapshot.iter().any(|a| a.image_id == id) {
                let mut v = v.clone();
                v.image_list.retain(|i| *i != id);
                v.snapshot.retain(|a| a.image_id != id);
                rows.push(Row::Version(v));
            }
        }
        if let Some(s) = t.image_sets.get(&img.image_set_id) {
            let mut s = s.clone();
            s.image_ids.retain(|i| *i != id);
            rows.push(Row::ImageSet(s));
        }
        rows.push(Row::ImageRemoved(id));
        db.commit(rows)?;
        drop(db);
        if img.is_local() {
            self.tiles.remove(id)?;
            let _ = fs::remove_file(self.original_path(id));
        }
        Ok(())
    }
}
