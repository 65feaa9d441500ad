//! Users, teams, rights and the crowd-annotation modes.
//!
//! Rights are held per team membership; every resource resolves to exactly
//! one team through its image set. Anything not explicitly granted is
//! denied, and inactive (deactivated) users are denied everything.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::db::{Row, Tables};
use crate::error::{Error, Result};
use crate::ids::*;
use crate::instance::Instance;
use crate::model::{AnnotationMode, AnnotationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Right {
    Create,
    Read,
    Update,
    Delete,
    Verify,
    Manage,
}

impl Right {
    pub const ALL: [Right; 6] = [
        Right::Create,
        Right::Read,
        Right::Update,
        Right::Delete,
        Right::Verify,
        Right::Manage,
    ];
}

impl std::str::FromStr for Right {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "create" => Right::Create,
            "read" => Right::Read,
            "update" => Right::Update,
            "delete" => Right::Delete,
            "verify" => Right::Verify,
            "manage" => Right::Manage,
            other => return Err(format!("unknown right {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub username: String,
    pub active: bool,
    pub anonymized: bool,
    #[serde(default)]
    pub is_admin: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Credential {
    pub user_id: UserId,
    pub salt: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Team {
    pub id: TeamId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub user_id: UserId,
    pub team_id: TeamId,
    pub rights: BTreeSet<Right>,
}

/// Anything a permission can be checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resource {
    Team(TeamId),
    ImageSet(ImageSetId),
    Image(ImageId),
    Annotation(AnnotationId),
    Version(VersionId),
}

/// Who performs an operation. `System` is the local administrator running
/// the command-line tool and bypasses team rights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor {
    System,
    User(UserId),
}

impl From<UserId> for Actor {
    fn from(u: UserId) -> Self {
        Actor::User(u)
    }
}

impl Actor {
    pub fn user(self) -> Option<UserId> {
        match self {
            Actor::System => None,
            Actor::User(u) => Some(u),
        }
    }
}

/// Whether `requester` may see an annotation created by `creator`.
pub fn annotation_visible(mode: AnnotationMode, requester: Actor, creator: UserId) -> bool {
    match (mode, requester) {
        (_, Actor::System) => true,
        (AnnotationMode::Blind, Actor::User(u)) => u == creator,
        (_, Actor::User(_)) => true,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum VerificationDetail {
    /// Any single mark completes the image.
    Cooperative { marked_by: Vec<UserId> },
    /// Every annotator must mark the image.
    Blind {
        marked_by: Vec<UserId>,
        pending: Vec<UserId>,
    },
    /// Every annotation needs `required` accepts from distinct users.
    SecondOpinion {
        required: u32,
        annotations: usize,
        pending: Vec<AnnotationId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageVerification {
    pub image_id: ImageId,
    pub verified: bool,
    pub detail: VerificationDetail,
}

/// Distinct users with an accept verdict on `a`.
pub fn distinct_accepts(a: &AnnotationRecord) -> usize {
    a.verifications
        .iter()
        .filter(|v| v.verdict == crate::model::Verdict::Accept)
        .map(|v| v.user_id)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Completion rule per mode. `annotators` are the active users holding the
/// create right on the set; `annotations` are the live annotations.
pub fn verification_status<'a>(
    image_id: ImageId,
    mode: AnnotationMode,
    marks: &BTreeSet<UserId>,
    annotators: &BTreeSet<UserId>,
    annotations: impl IntoIterator<Item = &'a AnnotationRecord>,
) -> ImageVerification {
    let detail = match mode {
        AnnotationMode::Cooperative => VerificationDetail::Cooperative {
            marked_by: marks.iter().copied().collect(),
        },
        AnnotationMode::Blind => VerificationDetail::Blind {
            marked_by: marks.iter().copied().collect(),
            pending: annotators.difference(marks).copied().collect(),
        },
        AnnotationMode::SecondOpinion {
            required_verifications,
        } => {
            let live: Vec<_> = annotations.into_iter().filter(|a| !a.deleted).collect();
            VerificationDetail::SecondOpinion {
                required: required_verifications,
                annotations: live.len(),
                pending: live
                    .iter()
                    .filter(|a| distinct_accepts(a) < required_verifications as usize)
                    .map(|a| a.id)
                    .collect(),
            }
        }
    };
    let verified = match &detail {
        VerificationDetail::Cooperative { marked_by } => !marked_by.is_empty(),
        VerificationDetail::Blind { pending, .. } => pending.is_empty() && !annotators.is_empty(),
        VerificationDetail::SecondOpinion { pending, .. } => pending.is_empty(),
    };
    ImageVerification {
        image_id,
        verified,
        detail,
    }
}

pub(crate) fn hash_password(salt: &str, password: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::new()
        .chain_update(salt.as_bytes())
        .chain_update(password.as_bytes())
        .finalize();
    hex(&digest)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn random_token() -> String {
    hex(&rand::random::<[u8; 20]>())
}

impl Tables {
    pub(crate) fn team_of(&self, resource: Resource) -> Option<TeamId> {
        match resource {
            Resource::Team(t) => self.teams.contains_key(&t).then_some(t),
            Resource::ImageSet(s) => self.image_sets.get(&s).map(|s| s.team_id),
            Resource::Image(i) => self
                .images
                .get(&i)
                .and_then(|i| self.team_of(Resource::ImageSet(i.image_set_id))),
            Resource::Annotation(a) => self
                .annotations
                .get(&a)
                .and_then(|a| self.team_of(Resource::Image(a.image_id))),
            Resource::Version(v) => self
                .versions
                .get(&v)
                .and_then(|v| self.team_of(Resource::ImageSet(v.image_set_id))),
        }
    }

    pub(crate) fn allowed(&self, user: UserId, action: Right, resource: Resource) -> bool {
        let Some(u) = self.users.get(&user) else {
            return false;
        };
        if !u.active {
            return false;
        }
        let Some(team) = self.team_of(resource) else {
            return false;
        };
        self.memberships
            .get(&(team, user))
            .is_some_and(|m| m.rights.contains(&action))
    }

    pub(crate) fn require(&self, actor: Actor, action: Right, resource: Resource) -> Result<()> {
        match actor {
            Actor::System => Ok(()),
            Actor::User(u) if self.allowed(u, action, resource) => Ok(()),
            Actor::User(_) => Err(Error::PermissionDenied),
        }
    }

    pub(crate) fn is_admin(&self, actor: Actor) -> bool {
        match actor {
            Actor::System => true,
            Actor::User(u) => self.users.get(&u).is_some_and(|u| u.active && u.is_admin),
        }
    }

    pub(crate) fn mode_of_image(&self, image: ImageId) -> AnnotationMode {
        self.images
            .get(&image)
            .and_then(|i| self.image_sets.get(&i.image_set_id))
            .map(|s| s.mode)
            .unwrap_or_default()
    }

    pub(crate) fn annotation_visible_to(&self, actor: Actor, a: &AnnotationRecord) -> bool {
        annotation_visible(self.mode_of_image(a.image_id), actor, a.creator_id)
    }

    pub(crate) fn annotators(&self, team: TeamId) -> BTreeSet<UserId> {
        self.memberships
            .range((team, UserId(0))..=(team, UserId(u64::MAX)))
            .filter(|(_, m)| m.rights.contains(&Right::Create))
            .filter(|((_, u), _)| self.users.get(u).is_some_and(|u| u.active))
            .map(|((_, u), _)| *u)
            .collect()
    }
}

impl Instance {
    /// Allow iff `user` is active and holds `action` in the resource's team.
    pub fn check_permission(&self, user: UserId, action: Right, resource: Resource) -> bool {
        self.db.read().tables.allowed(user, action, resource)
    }

    pub fn create_user(&self, actor: Actor, username: &str, password: &str, is_admin: bool) -> Result<User> {
        let mut db = self.db.write();
        if !db.tables.is_admin(actor) {
            return Err(Error::PermissionDenied);
        }
        if username.is_empty() || username.starts_with("user-") {
            return Err(Error::InvalidInput(format!("username {username:?} is reserved")));
        }
        if db.tables.users.values().any(|u| u.username == username) {
            return Err(Error::Conflict(format!("user {username:?} exists")));
        }
        let user = User {
            id: UserId(db.tables.next.user + 1),
            username: username.to_string(),
            active: true,
            anonymized: false,
            is_admin,
        };
        let salt = random_token();
        let cred = Credential {
            user_id: user.id,
            hash: hash_password(&salt, password),
            salt,
        };
        db.commit(vec![Row::User(user.clone()), Row::Credential(cred)])?;
        Ok(user)
    }

    pub fn user(&self, id: UserId) -> Result<User> {
        self.db
            .read()
            .tables
            .users
            .get(&id)
            .cloned()
            .ok_or(Error::NotFound("user", id.0))
    }

    pub fn user_by_name(&self, username: &str) -> Option<User> {
        self.db
            .read()
            .tables
            .users
            .values()
            .find(|u| u.username == username)
            .cloned()
    }

    pub fn users(&self) -> Vec<User> {
        self.db.read().tables.users.values().cloned().collect()
    }

    /// Exchanges credentials for a fresh API token.
    pub fn login(&self, username: &str, password: &str) -> Result<String> {
        let mut db = self.db.write();
        let user = db
            .tables
            .users
            .values()
            .find(|u| u.username == username && u.active)
            .ok_or(Error::Unauthenticated)?;
        let cred = db
            .tables
            .credentials
            .get(&user.id)
            .ok_or(Error::Unauthenticated)?;
        if hash_password(&cred.salt, password) != cred.hash {
            return Err(Error::Unauthenticated);
        }
        let token = random_token();
        let user_id = user.id;
        db.commit(vec![Row::Token {
            token: token.clone(),
            user_id,
        }])?;
        Ok(token)
    }

    /// Issues a token without a password. Administrative use only.
    pub fn issue_token(&self, actor: Actor, user_id: UserId) -> Result<String> {
        let mut db = self.db.write();
        if !db.tables.is_admin(actor) {
            return Err(Error::PermissionDenied);
        }
        if !db.tables.users.get(&user_id).is_some_and(|u| u.active) {
            return Err(Error::NotFound("user", user_id.0));
        }
        let token = random_token();
        db.commit(vec![Row::Token {
            token: token.clone(),
            user_id,
        }])?;
        Ok(token)
    }

    /// Resolves an API token to an active user.
    pub fn authenticate(&self, token: &str) -> Result<UserId> {
        let db = self.db.read();
        let user = db.tables.tokens.get(token).ok_or(Error::Unauthenticated)?;
        match db.tables.users.get(user) {
            Some(u) if u.active => Ok(u.id),
            _ => Err(Error::Unauthenticated),
        }
    }

    pub fn create_team(&self, actor: Actor, name: &str) -> Result<Team> {
        let mut db = self.db.write();
        if !db.tables.is_admin(actor) {
            return Err(Error::PermissionDenied);
        }
        let team = Team {
            id: TeamId(db.tables.next.team + 1),
            name: name.to_string(),
        };
        db.commit(vec![Row::Team(team.clone())])?;
        Ok(team)
    }

    pub fn teams(&self, actor: Actor) -> Vec<Team> {
        let db = self.db.read();
        let t = &db.tables;
        t.teams
            .values()
            .filter(|team| match actor {
                Actor::System => true,
                Actor::User(u) => t.is_admin(actor) || t.memberships.contains_key(&(team.id, u)),
            })
            .cloned()
            .collect()
    }

    /// Replaces a user's rights in a team. An empty set removes the membership.
    pub fn set_membership(
        &self,
        actor: Actor,
        team_id: TeamId,
        user_id: UserId,
        rights: BTreeSet<Right>,
    ) -> Result<Option<Membership>> {
        let mut db = self.db.write();
        let t = &db.tables;
        if !t.is_admin(actor) {
            t.require(actor, Right::Manage, Resource::Team(team_id))?;
        }
        if !t.teams.contains_key(&team_id) {
            return Err(Error::NotFound("team", team_id.0));
        }
        if !t.users.contains_key(&user_id) {
            return Err(Error::NotFound("user", user_id.0));
        }
        if rights.is_empty() {
            db.commit(vec![Row::MembershipRemoved { user_id, team_id }])?;
            return Ok(None);
        }
        let m = Membership {
            user_id,
            team_id,
            rights,
        };
        db.commit(vec![Row::Membership(m.clone())])?;
        Ok(Some(m))
    }

    pub fn memberships(&self, team_id: TeamId) -> Vec<Membership> {
        let db = self.db.read();
        db.tables
            .memberships
            .values()
            .filter(|m| m.team_id == team_id)
            .cloned()
            .collect()
    }

    /// Ids of the annotations on `image_id` the requester may see.
    pub fn visible_annotations(&self, actor: Actor, image_id: ImageId) -> Result<BTreeSet<AnnotationId>> {
        let db = self.db.read();
        let t = &db.tables;
        if !t.images.contains_key(&image_id) {
            return Err(Error::NotFound("image", image_id.0));
        }
        t.require(actor, Right::Read, Resource::Image(image_id))?;
        Ok(t
            .by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .filter_map(|id| t.annotations.get(id))
            .filter(|a| !a.deleted && t.annotation_visible_to(actor, a))
            .map(|a| a.id)
            .collect())
    }

    /// Records that `actor` has finished working on an image.
    pub fn mark_image_verified(&self, actor: Actor, image_id: ImageId) -> Result<ImageVerification> {
        let user = actor
            .user()
            .ok_or_else(|| Error::InvalidInput("image marks need a user".into()))?;
        {
            let mut db = self.db.write();
            if !db.tables.images.contains_key(&image_id) {
                return Err(Error::NotFound("image", image_id.0));
            }
            db.tables.require(actor, Right::Verify, Resource::Image(image_id))?;
            db.commit(vec![Row::ImageMark { image_id, user_id: user }])?;
        }
        self.image_verified(image_id)
    }

    pub fn image_verified(&self, image_id: ImageId) -> Result<ImageVerification> {
        let db = self.db.read();
        let t = &db.tables;
        let image = t.images.get(&image_id).ok_or(Error::NotFound("image", image_id.0))?;
        let set = &t.image_sets[&image.image_set_id];
        let marks: BTreeSet<UserId> = t
            .image_marks
            .range((image_id, UserId(0))..=(image_id, UserId(u64::MAX)))
            .map(|(_, u)| *u)
            .collect();
        let annotators = t.annotators(set.team_id);
        let annotations = t
            .by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .filter_map(|id| t.annotations.get(id));
        Ok(verification_status(image_id, set.mode, &marks, &annotators, annotations))
    }

    /// Anonymizes and deactivates a user. Annotations and versions keep
    /// referencing the same id.
    pub fn deactivate_user(&self, actor: Actor, user_id: UserId) -> Result<User> {
        let mut db = self.db.write();
        let t = &db.tables;
        let target = t.users.get(&user_id).ok_or(Error::NotFound("user", user_id.0))?;
        let authorized = t.is_admin(actor)
            || actor.user().is_some_and(|admin| {
                t.memberships
                    .values()
                    .filter(|m| m.user_id == user_id)
                    .any(|m| t.allowed(admin, Right::Manage, Resource::Team(m.team_id)))
            });
        if !authorized {
            return Err(Error::PermissionDenied);
        }
        let user = User {
            username: format!("user-{user_id}"),
            active: false,
            anonymized: true,
            ..target.clone()
        };
        let mut rows = vec![Row::User(user.clone())];
        rows.extend(
            t.tokens
                .iter()
                .filter(|(_, u)| **u == user_id)
                .map(|(tok, _)| Row::TokenRemoved(tok.clone())),
        );
        db.commit(rows)?;
        Ok(user)
    }
}
