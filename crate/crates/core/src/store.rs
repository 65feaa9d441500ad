//! Annotation lifecycle: CRUD, verification, media, versions and export.
//!
//! Annotations are soft deleted so that versions created earlier keep
//! their full state. A version freezes the image list and a copy of every
//! annotation record of the set at creation time.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::access::{Actor, Resource, Right};
use crate::db::{Row, Tables};
use crate::error::{Error, Result};
use crate::ids::*;
use crate::instance::Instance;
use crate::model::{
    single_click_vector, validate_vector, AnnotationRecord, AnnotationVector, Origin, Rect, Verdict,
    Verification,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Version {
    pub id: VersionId,
    pub image_set_id: ImageSetId,
    pub name: String,
    pub description: Option<String>,
    pub created_at: DateTime<Utc>,
    pub image_list: Vec<ImageId>,
    pub snapshot: Vec<AnnotationRecord>,
    pub artifact_ids: Vec<ArtifactId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub id: ArtifactId,
    pub version_id: VersionId,
    pub name: String,
    pub mime_type: String,
    pub bytes_ref: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaAttachment {
    pub id: MediaId,
    pub annotation_id: AnnotationId,
    pub mime_type: String,
    pub bytes_ref: String,
    pub name: String,
}

/// Partial update; `None` leaves a field untouched.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct AnnotationUpdate {
    #[serde(default)]
    pub vector: Option<Value>,
    #[serde(default, alias = "annotation_type")]
    pub template_id: Option<TemplateId>,
    #[serde(default)]
    pub meta: Option<Value>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NewAnnotation {
    #[serde(alias = "image")]
    pub image_id: ImageId,
    #[serde(alias = "annotation_type")]
    pub template_id: TemplateId,
    pub vector: Value,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Debug, Clone, Default)]
pub struct AnnotationFilter {
    pub image_id: Option<ImageId>,
    pub image_set_id: Option<ImageSetId>,
    pub template_id: Option<TemplateId>,
    /// Keeps annotations whose bounding box intersects the window.
    pub window: Option<Rect>,
    pub creator: Option<UserId>,
    /// `true`: at least one accept verdict; `false`: none.
    pub verified: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageRequest {
    pub limit: usize,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct QueryPage {
    /// Total number of matches across all pages.
    pub count: usize,
    pub results: Vec<AnnotationRecord>,
}

/// Placeholders available in export line templates.
pub const EXPORT_PLACEHOLDERS: &[&str] = &[
    "id",
    "public_name",
    "template_name",
    "kind",
    "vector",
    "creator",
    "updated_at",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(&'static str),
}

/// Splits `{field}` placeholders from literal text; `{{` and `}}` escape braces.
fn parse_export_template(template: &str) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                lit.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                lit.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(c) => name.push(c),
                        None => return Err(Error::UnknownPlaceholder(name)),
                    }
                }
                let field = EXPORT_PLACEHOLDERS
                    .iter()
                    .find(|p| **p == name)
                    .ok_or(Error::UnknownPlaceholder(name))?;
                if !lit.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                out.push(Segment::Field(field));
            }
            c => lit.push(c),
        }
    }
    if !lit.is_empty() {
        out.push(Segment::Literal(lit));
    }
    Ok(out)
}

impl Tables {
    pub(crate) fn visible_annotation(&self, actor: Actor, id: AnnotationId, right: Right) -> Result<&AnnotationRecord> {
        let a = self
            .annotations
            .get(&id)
            .ok_or(Error::NotFound("annotation", id.0))?;
        if !self.annotation_visible_to(actor, a) {
            return Err(Error::NotFound("annotation", id.0));
        }
        self.require(actor, right, Resource::Annotation(id))?;
        Ok(a)
    }

    fn template_in_set(&self, image: ImageId, template: TemplateId) -> Result<()> {
        let set = self
            .images
            .get(&image)
            .and_then(|i| self.image_sets.get(&i.image_set_id))
            .ok_or(Error::NotFound("image", image.0))?;
        let attached = set
            .product_ids
            .iter()
            .filter_map(|p| self.products.get(p))
            .any(|p| p.template_ids.contains(&template));
        if attached {
            Ok(())
        } else {
            Err(Error::TemplateNotInProduct(template.0))
        }
    }

    fn check_new(&self, actor: Actor, new: &NewAnnotation) -> Result<AnnotationVector> {
        let image = self
            .images
            .get(&new.image_id)
            .ok_or(Error::NotFound("image", new.image_id.0))?;
        self.require(actor, Right::Create, Resource::Image(new.image_id))?;
        let template = self
            .templates
            .get(&new.template_id)
            .ok_or(Error::NotFound("annotation template", new.template_id.0))?;
        self.template_in_set(new.image_id, new.template_id)?;
        Ok(validate_vector(
            template.vector_kind,
            &new.vector,
            image.width,
            image.height,
        )?)
    }
}

fn monotone(prev: DateTime<Utc>, now: DateTime<Utc>) -> DateTime<Utc> {
    prev.max(now)
}

fn require_user(actor: Actor) -> Result<UserId> {
    actor
        .user()
        .ok_or_else(|| Error::InvalidInput("annotation edits need a user".into()))
}

impl Instance {
    pub fn create_annotation(&self, actor: Actor, new: NewAnnotation) -> Result<AnnotationRecord> {
        Ok(self.import_precomputed(actor, vec![new])?.remove(0))
    }

    /// Creates many annotations at once (e.g. model predictions). Either
    /// all of them are stored or none.
    pub fn import_precomputed(&self, actor: Actor, batch: Vec<NewAnnotation>) -> Result<Vec<AnnotationRecord>> {
        let user = require_user(actor)?;
        let mut db = self.db.write();
        let now = self.now();
        let mut next = db.tables.next.annotation;
        let mut records = Vec::with_capacity(batch.len());
        for new in batch {
            let vector = db.tables.check_new(actor, &new)?;
            next += 1;
            records.push(AnnotationRecord {
                id: AnnotationId(next),
                image_id: new.image_id,
                template_id: new.template_id,
                vector,
                creator_id: user,
                last_editor_id: user,
                created_at: now,
                updated_at: now,
                meta: new.meta,
                deleted: false,
                verifications: vec![],
                media_ids: vec![],
                origin: None,
            });
        }
        db.commit(records.iter().cloned().map(Row::Annotation).collect())?;
        Ok(records)
    }

    /// Box or circle of the template's default size centred on a click.
    pub fn create_single_click(
        &self,
        actor: Actor,
        image_id: ImageId,
        template_id: TemplateId,
        x: f64,
        y: f64,
    ) -> Result<AnnotationRecord> {
        let (template, image) = {
            let db = self.db.read();
            let t = &db.tables;
            (
                t.templates
                    .get(&template_id)
                    .cloned()
                    .ok_or(Error::NotFound("annotation template", template_id.0))?,
                t.images
                    .get(&image_id)
                    .cloned()
                    .ok_or(Error::NotFound("image", image_id.0))?,
            )
        };
        let v = single_click_vector(&template, x, y, image.width, image.height)?;
        self.create_annotation(
            actor,
            NewAnnotation {
                image_id,
                template_id,
                vector: v.coords_value(),
                meta: Value::Null,
            },
        )
    }

    pub fn annotation(&self, actor: Actor, id: AnnotationId) -> Result<AnnotationRecord> {
        let db = self.db.read();
        db.tables.visible_annotation(actor, id, Right::Read).cloned()
    }

    pub fn update_annotation(&self, actor: Actor, id: AnnotationId, update: AnnotationUpdate) -> Result<AnnotationRecord> {
        let user = require_user(actor)?;
        let mut db = self.db.write();
        let t = &db.tables;
        let mut a = t.visible_annotation(actor, id, Right::Update)?.clone();
        if a.deleted {
            return Err(Error::Deleted(id.0));
        }
        if let Some(tid) = update.template_id {
            t.templates
                .get(&tid)
                .ok_or(Error::NotFound("annotation template", tid.0))?;
            t.template_in_set(a.image_id, tid)?;
            a.template_id = tid;
        }
        let kind = t.templates[&a.template_id].vector_kind;
        let image = &t.images[&a.image_id];
        match update.vector {
            Some(coords) => a.vector = validate_vector(kind, &coords, image.width, image.height)?,
            None if a.vector.kind() != kind => {
                return Err(Error::InvalidInput(format!(
                    "template expects {kind} geometry, annotation is {}",
                    a.vector.kind()
                )))
            }
            None => {}
        }
        if let Some(meta) = update.meta {
            a.meta = meta;
        }
        a.last_editor_id = user;
        a.updated_at = monotone(a.updated_at, self.now());
        db.commit(vec![Row::Annotation(a.clone())])?;
        Ok(a)
    }

    /// Soft delete. Repeated deletes succeed without changes.
    pub fn delete_annotation(&self, actor: Actor, id: AnnotationId) -> Result<AnnotationRecord> {
        let user = require_user(actor)?;
        let mut db = self.db.write();
        let mut a = db.tables.visible_annotation(actor, id, Right::Delete)?.clone();
        if a.deleted {
            return Ok(a);
        }
        a.deleted = true;
        a.last_editor_id = user;
        a.updated_at = monotone(a.updated_at, self.now());
        db.commit(vec![Row::Annotation(a.clone())])?;
        Ok(a)
    }

    /// Records a verdict; a user's newer verdict replaces the older one.
    pub fn verify_annotation(&self, actor: Actor, id: AnnotationId, verdict: Verdict) -> Result<Vec<Verification>> {
        let user = require_user(actor)?;
        let mut db = self.db.write();
        let mut a = db.tables.visible_annotation(actor, id, Right::Verify)?.clone();
        if a.deleted {
            return Err(Error::Deleted(id.0));
        }
        a.verifications.retain(|v| v.user_id != user);
        a.verifications.push(Verification {
            user_id: user,
            verdict,
            at: self.now(),
        });
        db.commit(vec![Row::Annotation(a.clone())])?;
        Ok(a.verifications)
    }

    pub fn query_annotations(&self, actor: Actor, filter: &AnnotationFilter, page: PageRequest) -> Result<QueryPage> {
        if page.limit == 0 {
            return Err(Error::BadFilter("limit must be >= 1".into()));
        }
        if let Some(w) = &filter.window {
            if !(w.x1 <= w.x2 && w.y1 <= w.y2) {
                return Err(Error::BadFilter("window needs x1 <= x2 and y1 <= y2".into()));
            }
        }
        let db = self.db.read();
        let t = &db.tables;
        if let Some(img) = filter.image_id {
            if !t.images.contains_key(&img) {
                return Err(Error::NotFound("image", img.0));
            }
            t.require(actor, Right::Read, Resource::Image(img))?;
        }
        if let Some(set) = filter.image_set_id {
            if !t.image_sets.contains_key(&set) {
                return Err(Error::NotFound("image set", set.0));
            }
            t.require(actor, Right::Read, Resource::ImageSet(set))?;
        }
        let candidates: Box<dyn Iterator<Item = &AnnotationRecord>> = match filter.image_id {
            Some(img) => Box::new(
                t.by_image
                    .get(&img)
                    .into_iter()
                    .flatten()
                    .map(|id| &t.annotations[id]),
            ),
            None => Box::new(t.annotations.values()),
        };
        let mut readable = std::collections::HashMap::new();
        let matches: Vec<&AnnotationRecord> = candidates
            .filter(|a| !a.deleted)
            .filter(|a| filter.template_id.is_none_or(|x| a.template_id == x))
            .filter(|a| filter.creator.is_none_or(|x| a.creator_id == x))
            .filter(|a| filter.verified.is_none_or(|x| (a.accept_count() > 0) == x))
            .filter(|a| {
                let img = &t.images[&a.image_id];
                filter.image_set_id.is_none_or(|s| img.image_set_id == s)
                    && filter.window.is_none_or(|w| {
                        a.vector.bounding_box(img.width, img.height).intersects(&w)
                    })
            })
            .filter(|a| {
                *readable.entry(a.image_id).or_insert_with(|| {
                    t.require(actor, Right::Read, Resource::Image(a.image_id)).is_ok()
                })
            })
            .filter(|a| t.annotation_visible_to(actor, a))
            .collect();
        Ok(QueryPage {
            count: matches.len(),
            results: matches
                .into_iter()
                .skip(page.offset)
                .take(page.limit)
                .cloned()
                .collect(),
        })
    }

    // ---- media ----

    pub fn attach_media(
        &self,
        actor: Actor,
        annotation_id: AnnotationId,
        name: &str,
        mime_type: &str,
        bytes: &[u8],
    ) -> Result<MediaAttachment> {
        {
            let db = self.db.read();
            db.tables.visible_annotation(actor, annotation_id, Right::Update)?;
        }
        let key = self.store_blob(bytes)?;
        let mut db = self.db.write();
        let mut a = db
            .tables
            .visible_annotation(actor, annotation_id, Right::Update)?
            .clone();
        let m = MediaAttachment {
            id: MediaId(db.tables.next.media + 1),
            annotation_id,
            mime_type: mime_type.into(),
            bytes_ref: key,
            name: name.into(),
        };
        a.media_ids.push(m.id);
        db.commit(vec![Row::Media(m.clone()), Row::Annotation(a)])?;
        Ok(m)
    }

    pub fn media(&self, actor: Actor, id: MediaId) -> Result<(MediaAttachment, Vec<u8>)> {
        let m = {
            let db = self.db.read();
            let m = db.tables.media.get(&id).ok_or(Error::NotFound("media", id.0))?;
            db.tables.visible_annotation(actor, m.annotation_id, Right::Read)?;
            m.clone()
        };
        let bytes = self.read_blob(&m.bytes_ref)?;
        Ok((m, bytes))
    }

    pub fn media_list(&self, actor: Actor, annotation: Option<AnnotationId>) -> Vec<MediaAttachment> {
        let db = self.db.read();
        let t = &db.tables;
        t.media
            .values()
            .filter(|m| annotation.is_none_or(|a| m.annotation_id == a))
            .filter(|m| t.visible_annotation(actor, m.annotation_id, Right::Read).is_ok())
            .cloned()
            .collect()
    }

    /// Live visible annotations per template on one image.
    pub fn template_counts(&self, actor: Actor, image_id: ImageId) -> Result<Vec<(TemplateId, usize)>> {
        let db = self.db.read();
        let t = &db.tables;
        t.images.get(&image_id).ok_or(Error::NotFound("image", image_id.0))?;
        t.require(actor, Right::Read, Resource::Image(image_id))?;
        let mut counts = std::collections::BTreeMap::new();
        for a in t
            .by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(|id| &t.annotations[id])
            .filter(|a| !a.deleted && t.annotation_visible_to(actor, a))
        {
            *counts.entry(a.template_id).or_insert(0) += 1;
        }
        Ok(counts.into_iter().collect())
    }

    // ---- versions ----

    /// Freezes the set's image list and annotation state.
    pub fn create_version(
        &self,
        actor: Actor,
        image_set_id: ImageSetId,
        name: &str,
        description: Option<&str>,
    ) -> Result<Version> {
        let mut db = self.db.write();
        let t = &db.tables;
        let set = t
            .image_sets
            .get(&image_set_id)
            .ok_or(Error::NotFound("image set", image_set_id.0))?;
        t.require(actor, Right::Manage, Resource::ImageSet(image_set_id))?;
        let images: BTreeSet<ImageId> = set.image_ids.iter().copied().collect();
        let mut snapshot: Vec<AnnotationRecord> = images
            .iter()
            .flat_map(|i| t.by_image.get(i).into_iter().flatten())
            .map(|id| t.annotations[id].clone())
            .collect();
        snapshot.sort_by_key(|a| a.id);
        let v = Version {
            id: VersionId(t.next.version + 1),
            image_set_id,
            name: name.into(),
            description: description.map(str::to_string),
            created_at: self.now(),
            image_list: set.image_ids.clone(),
            snapshot,
            artifact_ids: vec![],
        };
        db.commit(vec![Row::Version(v.clone())])?;
        Ok(v)
    }

    pub fn version(&self, actor: Actor, id: VersionId) -> Result<Version> {
        let db = self.db.read();
        let v = db.tables.versions.get(&id).ok_or(Error::NotFound("version", id.0))?;
        db.tables.require(actor, Right::Read, Resource::Version(id))?;
        let mut v = v.clone();
        v.snapshot.retain(|a| {
            crate::access::annotation_visible(db.tables.image_sets[&v.image_set_id].mode, actor, a.creator_id)
        });
        Ok(v)
    }

    pub fn versions(&self, actor: Actor, set: Option<ImageSetId>) -> Vec<Version> {
        let ids: Vec<VersionId> = {
            let db = self.db.read();
            db.tables
                .versions
                .values()
                .filter(|v| set.is_none_or(|s| v.image_set_id == s))
                .map(|v| v.id)
                .collect()
        };
        ids.into_iter().filter_map(|id| self.version(actor, id).ok()).collect()
    }

    /// Stores a file (metrics, model, ...) alongside a version. The
    /// snapshot itself is untouched.
    pub fn attach_artifact(
        &self,
        actor: Actor,
        version_id: VersionId,
        name: &str,
        mime_type: &str,
        bytes: &[u8],
    ) -> Result<Artifact> {
        {
            let db = self.db.read();
            db.tables
                .versions
                .get(&version_id)
                .ok_or(Error::NotFound("version", version_id.0))?;
            db.tables.require(actor, Right::Create, Resource::Version(version_id))?;
        }
        let key = self.store_blob(bytes)?;
        let mut db = self.db.write();
        let mut v = db
            .tables
            .versions
            .get(&version_id)
            .cloned()
            .ok_or(Error::NotFound("version", version_id.0))?;
        let a = Artifact {
            id: ArtifactId(db.tables.next.artifact + 1),
            version_id,
            name: name.into(),
            mime_type: mime_type.into(),
            bytes_ref: key,
            created_at: self.now(),
        };
        v.artifact_ids.push(a.id);
        db.commit(vec![Row::Artifact(a.clone()), Row::Version(v)])?;
        Ok(a)
    }

    pub fn artifact(&self, actor: Actor, id: ArtifactId) -> Result<(Artifact, Vec<u8>)> {
        let a = {
            let db = self.db.read();
            let a = db.tables.artifacts.get(&id).ok_or(Error::NotFound("artifact", id.0))?;
            db.tables.require(actor, Right::Read, Resource::Version(a.version_id))?;
            a.clone()
        };
        let bytes = self.read_blob(&a.bytes_ref)?;
        Ok((a, bytes))
    }

    /// Renders one line per live annotation through `template`, using the
    /// version snapshot when given and the current state otherwise.
    pub fn export_annotations(
        &self,
        actor: Actor,
        image_set_id: ImageSetId,
        version_id: Option<VersionId>,
        template: &str,
    ) -> Result<String> {
        let segments = parse_export_template(template)?;
        let db = self.db.read();
        let t = &db.tables;
        let set = t
            .image_sets
            .get(&image_set_id)
            .ok_or(Error::NotFound("image set", image_set_id.0))?;
        t.require(actor, Right::Read, Resource::ImageSet(image_set_id))?;
        let live: Vec<&AnnotationRecord>;
        let records: Vec<&AnnotationRecord> = match version_id {
            Some(vid) => {
                let v = t
                    .versions
                    .get(&vid)
                    .filter(|v| v.image_set_id == image_set_id)
                    .ok_or(Error::NotFound("version", vid.0))?;
                v.snapshot.iter().collect()
            }
            None => {
                live = set
                    .image_ids
                    .iter()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .flat_map(|i| t.by_image.get(i).into_iter().flatten())
                    .map(|id| &t.annotations[id])
                    .collect();
                let mut l = live;
                l.sort_by_key(|a| a.id);
                l
            }
        };
        let mut out = String::new();
        for a in records {
            if a.deleted || !crate::access::annotation_visible(set.mode, actor, a.creator_id) {
                continue;
            }
            for seg in &segments {
                match seg {
                    Segment::Literal(s) => out.push_str(s),
                    Segment::Field(f) => out.push_str(&render_field(t, a, f)),
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn render_field(t: &Tables, a: &AnnotationRecord, field: &str) -> String {
    match field {
        "id" => a.id.to_string(),
        "public_name" => t
            .images
            .get(&a.image_id)
            .map(|i| i.public_name.clone())
            .unwrap_or_default(),
        "template_name" => t
            .templates
            .get(&a.template_id)
            .map(|x| x.name.clone())
            .unwrap_or_default(),
        "kind" => a.vector.kind().to_string(),
        "vector" => a.vector.coords_json(),
        "creator" => a.creator_id.to_string(),
        "updated_at" => a.updated_at.to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
        _ => unreachable!("placeholder list is closed"),
    }
}

impl Instance {
    /// Inserts or refreshes an annotation identified by its origin.
    pub(crate) fn upsert_by_origin(
        &self,
        actor: Actor,
        origin: Origin,
        image_id: ImageId,
        template_id: TemplateId,
        vector: AnnotationVector,
        meta: Value,
        deleted: bool,
    ) -> Result<AnnotationRecord> {
        let user = require_user(actor)?;
        let mut db = self.db.write();
        let t = &db.tables;
        t.require(actor, Right::Create, Resource::Image(image_id))?;
        let image = t.images.get(&image_id).ok_or(Error::NotFound("image", image_id.0))?;
        vector.check_bounds(image.width, image.height)?;
        let now = self.now();
        let record = match t.by_origin.get(&origin).and_then(|id| t.annotations.get(id)) {
            Some(existing) => {
                let unchanged = existing.vector == vector
                    && existing.template_id == template_id
                    && existing.meta == meta
                    && existing.deleted == deleted
                    && existing.image_id == image_id;
                if unchanged {
                    return Ok(existing.clone());
                }
                AnnotationRecord {
                    image_id,
                    template_id,
                    vector,
                    meta,
                    deleted,
                    last_editor_id: user,
                    updated_at: monotone(existing.updated_at, now),
                    ..existing.clone()
                }
            }
            None => AnnotationRecord {
                id: AnnotationId(t.next.annotation + 1),
                image_id,
                template_id,
                vector,
                creator_id: user,
                last_editor_id: user,
                created_at: now,
                updated_at: now,
                meta,
                deleted,
                verifications: vec![],
                media_ids: vec![],
                origin: Some(origin),
            },
        };
        db.commit(vec![Row::Annotation(record.clone())])?;
        Ok(record)
    }
}
