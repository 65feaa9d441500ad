//! Cross-instance sharing.
//!
//! The owning instance hands out a scoped token per shared image. A peer
//! stores a [`RemoteImageRef`] in one of its virtual image sets and resolves
//! tiles against the owner with that token. Annotations can be pulled from
//! the owner and are upserted locally keyed by their origin, so repeated
//! imports are idempotent.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::access::{random_token, Actor, Resource, Right};
use crate::db::Row;
use crate::error::{Error, Result};
use crate::ids::*;
use crate::instance::{Instance, NewTemplate};
use crate::model::{AnnotationVector, ImageRecord, Origin, VectorKind};

/// Pointer to an image owned by another instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteImageRef {
    pub instance_base_url: String,
    pub remote_image_id: ImageId,
    pub remote_public_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default = "one")]
    pub frame_count: u32,
    pub scoped_token: String,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareGrant {
    pub token: String,
    pub image_id: ImageId,
    pub peer: String,
    pub created_at: DateTime<Utc>,
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerTemplate {
    pub name: String,
    pub vector_kind: VectorKind,
    #[serde(default)]
    pub color: Option<String>,
}

/// An annotation as read from the owning instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerAnnotation {
    pub id: AnnotationId,
    pub template: PeerTemplate,
    pub vector: AnnotationVector,
    #[serde(default)]
    pub meta: Value,
    #[serde(default)]
    pub deleted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub created: usize,
    pub updated: usize,
    pub unchanged: usize,
    /// Previously imported annotations missing from the peer's listing.
    pub deleted: usize,
}

impl Instance {
    /// Issues a tile-read token for one image and the reference a peer
    /// needs to display it.
    pub fn share_image(&self, actor: Actor, image_id: ImageId, peer: &str) -> Result<(ShareGrant, RemoteImageRef)> {
        let mut db = self.db.write();
        let t = &db.tables;
        let img = t.images.get(&image_id).ok_or(Error::NotFound("image", image_id.0))?;
        t.require(actor, Right::Manage, Resource::Image(image_id))?;
        if !img.is_local() {
            return Err(Error::InvalidInput("only local images can be shared".into()));
        }
        let token = random_token();
        let shared = RemoteImageRef {
            instance_base_url: self.base_url().trim_end_matches('/').to_string(),
            remote_image_id: image_id,
            remote_public_name: img.public_name.clone(),
            width: img.width,
            height: img.height,
            frame_count: img.frame_count,
            scoped_token: token.clone(),
        };
        let grant = ShareGrant {
            token,
            image_id,
            peer: peer.to_string(),
            created_at: self.now(),
            revoked: false,
        };
        db.commit(vec![Row::Grant(grant.clone())])?;
        Ok((grant, shared))
    }

    pub fn revoke_share(&self, actor: Actor, token: &str) -> Result<ShareGrant> {
        let mut db = self.db.write();
        let t = &db.tables;
        let grant = t.grants.get(token).ok_or(Error::NotFound("share", 0))?;
        t.require(actor, Right::Manage, Resource::Image(grant.image_id))?;
        let grant = ShareGrant {
            revoked: true,
            ..grant.clone()
        };
        db.commit(vec![Row::Grant(grant.clone())])?;
        Ok(grant)
    }

    pub fn shares(&self, actor: Actor, image_id: ImageId) -> Result<Vec<ShareGrant>> {
        let db = self.db.read();
        let t = &db.tables;
        t.require(actor, Right::Manage, Resource::Image(image_id))?;
        Ok(t.grants.values().filter(|g| g.image_id == image_id).cloned().collect())
    }

    pub fn is_scoped_token(&self, token: &str) -> bool {
        self.db.read().tables.grants.contains_key(token)
    }

    /// Checks that `token` grants tile access to `image_id`.
    pub fn authorize_scoped(&self, token: &str, image_id: ImageId) -> Result<()> {
        let db = self.db.read();
        let grant = db.tables.grants.get(token).ok_or(Error::Unauthenticated)?;
        if grant.revoked {
            return Err(Error::TokenRevoked);
        }
        if grant.image_id != image_id || !db.tables.images.contains_key(&image_id) {
            return Err(Error::PermissionDenied);
        }
        Ok(())
    }

    /// Adds a remote image to a virtual set. Adding the same remote image
    /// twice returns the existing record.
    pub fn add_remote_to_virtual_set(
        &self,
        actor: Actor,
        set: ImageSetId,
        remote: RemoteImageRef,
    ) -> Result<ImageRecord> {
        let mut db = self.db.write();
        let t = &db.tables;
        let mut s = t.image_sets.get(&set).cloned().ok_or(Error::NotFound("image set", set.0))?;
        t.require(actor, Right::Create, Resource::ImageSet(set))?;
        if !s.is_virtual {
            return Err(Error::NotVirtual(set.0));
        }
        if remote.width == 0 || remote.height == 0 {
            return Err(Error::InvalidInput("remote image has no pixels".into()));
        }
        let base = remote.instance_base_url.trim_end_matches('/').to_string();
        if let Some(existing) = s.image_ids.iter().filter_map(|i| t.images.get(i)).find(|i| {
            i.remote
                .as_ref()
                .is_some_and(|r| r.instance_base_url == base && r.remote_image_id == remote.remote_image_id)
        }) {
            return Ok(existing.clone());
        }
        let id = ImageId(t.next.image + 1);
        let record = ImageRecord {
            id,
            private_name: None,
            public_name: remote.remote_public_name.clone(),
            width: remote.width,
            height: remote.height,
            frame_count: remote.frame_count.max(1),
            image_set_id: set,
            owner_instance: Some(base.clone()),
            remote: Some(RemoteImageRef {
                instance_base_url: base,
                ..remote
            }),
            created_at: self.now(),
        };
        s.image_ids.push(id);
        db.commit(vec![Row::Image(record.clone()), Row::ImageSet(s)])?;
        Ok(record)
    }

    /// Local template for a peer template: the first with the same name and
    /// kind, created when missing.
    fn map_peer_template(&self, peer: &PeerTemplate) -> Result<TemplateId> {
        if let Some(t) = self
            .templates()
            .into_iter()
            .find(|t| t.name == peer.name && t.vector_kind == peer.vector_kind)
        {
            return Ok(t.id);
        }
        let mut new = NewTemplate::new(&peer.name, peer.vector_kind);
        if let Some(c) = peer.color.as_ref().filter(|c| crate::model::is_hex_color(c)) {
            new.color = c.clone();
        }
        Ok(self.create_template(Actor::System, new)?.id)
    }

    /// Upserts annotations pulled from `peer` onto a local image. The list
    /// is the peer's complete live set for that image: earlier imports that
    /// no longer appear in it are soft deleted.
    pub fn import_peer_annotations(
        &self,
        actor: Actor,
        local_image: ImageId,
        peer: &str,
        annotations: Vec<PeerAnnotation>,
    ) -> Result<ImportReport> {
        self.check_permission_for(actor, Right::Create, Resource::Image(local_image))?;
        let peer = peer.trim_end_matches('/');
        let mut templates = BTreeMap::new();
        let mut report = ImportReport::default();
        let listed: std::collections::BTreeSet<u64> = annotations.iter().map(|a| a.id.0).collect();
        for a in annotations {
            let key = (a.template.name.clone(), a.template.vector_kind);
            let template_id = match templates.get(&key) {
                Some(id) => *id,
                None => {
                    let id = self.map_peer_template(&a.template)?;
                    templates.insert(key, id);
                    id
                }
            };
            let origin = Origin {
                instance: peer.to_string(),
                source_id: a.id.0,
            };
            let before = {
                let db = self.db.read();
                db.tables
                    .by_origin
                    .get(&origin)
                    .and_then(|id| db.tables.annotations.get(id))
                    .map(|r| r.updated_at)
            };
            let rec = self.upsert_by_origin(actor, origin, local_image, template_id, a.vector, a.meta, a.deleted)?;
            match before {
                None => report.created += 1,
                Some(t) if t == rec.updated_at => report.unchanged += 1,
                Some(_) => report.updated += 1,
            }
        }
        let gone: Vec<_> = {
            let db = self.db.read();
            let t = &db.tables;
            t.by_image
                .get(&local_image)
                .into_iter()
                .flatten()
                .map(|id| &t.annotations[id])
                .filter(|a| !a.deleted)
                .filter_map(|a| {
                    let o = a.origin.as_ref()?;
                    (o.instance == peer && !listed.contains(&o.source_id)).then(|| a.clone())
                })
                .collect()
        };
        for a in gone {
            let origin = a.origin.clone().expect("filtered on origin");
            self.upsert_by_origin(actor, origin, local_image, a.template_id, a.vector, a.meta, true)?;
            report.deleted += 1;
        }
        Ok(report)
    }
}
