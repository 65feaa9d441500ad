//! In-memory tables backed by an append-only JSON-lines journal.
//!
//! Every committed mutation appends the full new state of each touched row.
//! Opening an instance replays the journal with last-write-wins semantics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::access::{Credential, Membership, Team, User};
use crate::federation::ShareGrant;
use crate::ids::*;
use crate::layout::MapRegistry;
use crate::model::{AnnotationRecord, AnnotationTemplate, ImageRecord, ImageSet, Origin, Product};
use crate::screening::ScreeningMap;
use crate::store::{Artifact, MediaAttachment, Version};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "snake_case")]
pub(crate) enum Row {
    User(User),
    Credential(Credential),
    Token { token: String, user_id: UserId },
    TokenRemoved(String),
    Team(Team),
    Membership(Membership),
    MembershipRemoved { user_id: UserId, team_id: TeamId },
    ImageSet(ImageSet),
    Image(ImageRecord),
    ImageRemoved(ImageId),
    Template(AnnotationTemplate),
    Product(Product),
    Annotation(AnnotationRecord),
    AnnotationRemoved(AnnotationId),
    Version(Version),
    Artifact(Artifact),
    Media(MediaAttachment),
    MediaRemoved(MediaId),
    Screening(ScreeningMap),
    Registry(MapRegistry),
    ImageMark { image_id: ImageId, user_id: UserId },
    Grant(ShareGrant),
}

#[derive(Debug, Default)]
pub(crate) struct Tables {
    pub users: BTreeMap<UserId, User>,
    pub credentials: HashMap<UserId, Credential>,
    pub tokens: HashMap<String, UserId>,
    pub teams: BTreeMap<TeamId, Team>,
    pub memberships: BTreeMap<(TeamId, UserId), Membership>,
    pub image_sets: BTreeMap<ImageSetId, ImageSet>,
    pub images: BTreeMap<ImageId, ImageRecord>,
    pub templates: BTreeMap<TemplateId, AnnotationTemplate>,
    pub products: BTreeMap<ProductId, Product>,
    pub annotations: BTreeMap<AnnotationId, AnnotationRecord>,
    pub versions: BTreeMap<VersionId, Version>,
    pub artifacts: BTreeMap<ArtifactId, Artifact>,
    pub media: BTreeMap<MediaId, MediaAttachment>,
    pub screening: BTreeMap<ScreeningMapId, ScreeningMap>,
    pub registries: BTreeMap<ImageId, MapRegistry>,
    pub image_marks: BTreeSet<(ImageId, UserId)>,
    pub grants: BTreeMap<String, ShareGrant>,

    pub by_image: HashMap<ImageId, BTreeSet<AnnotationId>>,
    pub by_origin: HashMap<Origin, AnnotationId>,
    pub next: Counters,
}

#[derive(Debug, Default)]
pub(crate) struct Counters {
    pub user: u64,
    pub team: u64,
    pub image_set: u64,
    pub image: u64,
    pub template: u64,
    pub product: u64,
    pub annotation: u64,
    pub version: u64,
    pub artifact: u64,
    pub media: u64,
    pub screening: u64,
}

fn bump(counter: &mut u64, id: u64) {
    *counter = (*counter).max(id);
}

impl Tables {
    pub fn apply(&mut self, row: Row) {
        match row {
            Row::User(u) => {
                bump(&mut self.next.user, u.id.0);
                self.users.insert(u.id, u);
            }
            Row::Credential(c) => {
                self.credentials.insert(c.user_id, c);
            }
            Row::Token { token, user_id } => {
                self.tokens.insert(token, user_id);
            }
            Row::TokenRemoved(token) => {
                self.tokens.remove(&token);
            }
            Row::Team(t) => {
                bump(&mut self.next.team, t.id.0);
                self.teams.insert(t.id, t);
            }
            Row::Membership(m) => {
                self.memberships.insert((m.team_id, m.user_id), m);
            }
            Row::MembershipRemoved { user_id, team_id } => {
                self.memberships.remove(&(team_id, user_id));
            }
            Row::ImageSet(s) => {
                bump(&mut self.next.image_set, s.id.0);
                self.image_sets.insert(s.id, s);
            }
            Row::Image(i) => {
                bump(&mut self.next.image, i.id.0);
                self.images.insert(i.id, i);
            }
            Row::ImageRemoved(id) => {
                self.images.remove(&id);
                self.by_image.remove(&id);
                self.registries.remove(&id);
                self.image_marks.retain(|(i, _)| *i != id);
            }
            Row::Template(t) => {
                bump(&mut self.next.template, t.id.0);
                self.templates.insert(t.id, t);
            }
            Row::Product(p) => {
                bump(&mut self.next.product, p.id.0);
                self.products.insert(p.id, p);
            }
            Row::Annotation(a) => {
                bump(&mut self.next.annotation, a.id.0);
                if let Some(origin) = &a.origin {
                    self.by_origin.insert(origin.clone(), a.id);
                }
                self.by_image.entry(a.image_id).or_default().insert(a.id);
                self.annotations.insert(a.id, a);
            }
            Row::AnnotationRemoved(id) => {
                if let Some(a) = self.annotations.remove(&id) {
                    if let Some(set) = self.by_image.get_mut(&a.image_id) {
                        set.remove(&id);
                    }
                    if let Some(origin) = &a.origin {
                        self.by_origin.remove(origin);
                    }
                }
            }
            Row::Version(v) => {
                bump(&mut self.next.version, v.id.0);
                self.versions.insert(v.id, v);
            }
            Row::Artifact(a) => {
                bump(&mut self.next.artifact, a.id.0);
                self.artifacts.insert(a.id, a);
            }
            Row::Media(m) => {
                bump(&mut self.next.media, m.id.0);
                self.media.insert(m.id, m);
            }
            Row::MediaRemoved(id) => {
                self.media.remove(&id);
            }
            Row::Screening(s) => {
                bump(&mut self.next.screening, s.id.0);
                self.screening.insert(s.id, s);
            }
            Row::Registry(r) => {
                self.registries.insert(r.map_image_id, r);
            }
            Row::ImageMark { image_id, user_id } => {
                self.image_marks.insert((image_id, user_id));
            }
            Row::Grant(g) => {
                self.grants.insert(g.token.clone(), g);
            }
        }
    }
}

/// Tables plus their durable log.
#[derive(Debug)]
pub(crate) struct Db {
    pub tables: Tables,
    journal: Option<BufWriter<File>>,
}

impl Db {
    pub fn in_memory() -> Self {
        Self {
            tables: Tables::default(),
            journal: None,
        }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut tables = Tables::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Row>(&line) {
                    Ok(row) => tables.apply(row),
                    // A torn final write is dropped; anything earlier is corruption.
                    Err(e) if e.is_eof() => break,
                    Err(e) => {
                        return Err(std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("journal line {}: {e}", n + 1),
                        ))
                    }
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            tables,
            journal: Some(BufWriter::new(file)),
        })
    }

    /// Durably appends `rows`, then applies them.
    pub fn commit(&mut self, rows: Vec<Row>) -> std::io::Result<()> {
        if let Some(j) = self.journal.as_mut() {
            for row in &rows {
                serde_json::to_writer(&mut *j, row)?;
                j.write_all(b"\n")?;
            }
            j.flush()?;
        }
        for row in rows {
            self.tables.apply(row);
        }
        Ok(())
    }
}
