//! Collaborative annotation of gigapixel images.
//!
//! An [`Instance`] owns a storage root holding tile pyramids, uploaded
//! originals and a journal of every record. All operations take an
//! [`Actor`]: either a user, checked against team rights, or
//! [`Actor::System`] for local administration.
//!
//! ```
//! use exact_core::{Actor, Instance, InstanceConfig};
//!
//! let dir = tempfile::tempdir().unwrap();
//! let inst = Instance::open(InstanceConfig::new(dir.path())).unwrap();
//! let admin = inst.create_user(Actor::System, "admin", "secret", true).unwrap();
//! let team = inst.create_team(Actor::User(admin.id), "pathology").unwrap();
//! assert_eq!(inst.teams(Actor::User(admin.id)), vec![team]);
//! ```

pub mod access;
mod db;
pub mod error;
pub mod federation;
pub mod ids;
pub mod instance;
pub mod layout;
pub mod model;
pub mod screening;
pub mod store;
pub mod tiles;

pub use access::{Actor, Membership, Resource, Right, Team, User};
pub use error::{Error, Result};
pub use ids::*;
pub use instance::{Instance, InstanceConfig, NewTemplate};
pub use model::{
    AnnotationMode, AnnotationRecord, AnnotationTemplate, AnnotationVector, ImageRecord, ImageSet, Product,
    Rect, Verdict, VectorKind,
};
pub use tiles::{TileAddress, TileFormat, TILE_SIZE};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/annotations.md")]
    pub struct Annotations;
    #[doc = include_str!("../../../book/src/pyramids.md")]
    pub struct Pyramids;
    #[doc = include_str!("../../../book/src/access.md")]
    pub struct Access;
    #[doc = include_str!("../../../book/src/screening.md")]
    pub struct Screening;
    #[doc = include_str!("../../../book/src/versions.md")]
    pub struct Versions;
    #[doc = include_str!("../../../book/src/layout-maps.md")]
    pub struct LayoutMaps;
    #[doc = include_str!("../../../book/src/federation.md")]
    pub struct Federation;
    #[doc = include_str!("../../../book/src/server.md")]
    pub struct Server;
}
