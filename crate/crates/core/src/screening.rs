//! Persistent per-user screening maps.
//!
//! An image is split into equally sized patches overlapping by 15 %. The
//! stride along an axis is `floor(patch * (1 - overlap))`; the last patch
//! of each axis is pulled back so that it ends exactly on the image edge.
//! Clamping can only enlarge the final overlap.

use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{Actor, Resource, Right};
use crate::db::Row;
use crate::error::{Error, Result};
use crate::ids::*;
use crate::instance::Instance;

pub const SCREENING_OVERLAP: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScreeningError {
    #[error("patch {patch_w}x{patch_h} does not fit into image {image_w}x{image_h}")]
    PatchLargerThanImage {
        image_w: u32,
        image_h: u32,
        patch_w: u32,
        patch_h: u32,
    },
    #[error("cell ({col}, {row}) outside of the {cols}x{rows} grid")]
    CellOutOfRange { col: u32, row: u32, cols: u32, rows: u32 },
    #[error("overlap must be in [0, 1)")]
    BadOverlap,
}

/// Patch origins along both axes; patch `(col, row)` starts at `(xs[col], ys[row])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningGrid {
    pub patch_w: u32,
    pub patch_h: u32,
    pub xs: Vec<u32>,
    pub ys: Vec<u32>,
}

impl ScreeningGrid {
    pub fn cols(&self) -> u32 {
        self.xs.len() as u32
    }

    pub fn rows(&self) -> u32 {
        self.ys.len() as u32
    }

    pub fn patch_rect(&self, col: u32, row: u32) -> Option<PatchRect> {
        Some(PatchRect {
            x: *self.xs.get(col as usize)?,
            y: *self.ys.get(row as usize)?,
            w: self.patch_w,
            h: self.patch_h,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

fn axis_origins(image: u32, patch: u32, overlap: f64) -> Vec<u32> {
    // The epsilon keeps e.g. 200 * 0.85 from flooring to 169.
    let stride = ((patch as f64 * (1.0 - overlap)) + 1e-9).floor().max(1.0) as u32;
    let mut out = Vec::new();
    let mut origin = 0u32;
    while origin + patch < image {
        out.push(origin);
        origin += stride;
    }
    out.push(image - patch);
    out
}

pub fn compute_grid(
    image_w: u32,
    image_h: u32,
    patch_w: u32,
    patch_h: u32,
    overlap: f64,
) -> Result<ScreeningGrid, ScreeningError> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(ScreeningError::BadOverlap);
    }
    if patch_w == 0 || patch_h == 0 || patch_w > image_w || patch_h > image_h {
        return Err(ScreeningError::PatchLargerThanImage {
            image_w,
            image_h,
            patch_w,
            patch_h,
        });
    }
    Ok(ScreeningGrid {
        patch_w,
        patch_h,
        xs: axis_origins(image_w, patch_w, overlap),
        ys: axis_origins(image_h, patch_h, overlap),
    })
}

mod packed_bits {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bits))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

/// Screened flags are packed row-major, least significant bit first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningMap {
    pub id: ScreeningMapId,
    pub image_id: ImageId,
    pub user_id: UserId,
    pub grid: ScreeningGrid,
    #[serde(with = "packed_bits")]
    pub screened: Vec<u8>,
    pub current: (u32, u32),
    pub created_at: DateTime<Utc>,
}

impl ScreeningMap {
    fn index(&self, col: u32, row: u32) -> Result<usize, ScreeningError> {
        let (cols, rows) = (self.grid.cols(), self.grid.rows());
        if col >= cols || row >= rows {
            return Err(ScreeningError::CellOutOfRange { col, row, cols, rows });
        }
        Ok((row * cols + col) as usize)
    }

    pub fn is_screened(&self, col: u32, row: u32) -> bool {
        self.index(col, row)
            .is_ok_and(|i| self.screened[i / 8] & (1 << (i % 8)) != 0)
    }

    fn set(&mut self, col: u32, row: u32) -> Result<(), ScreeningError> {
        let i = self.index(col, row)?;
        self.screened[i / 8] |= 1 << (i % 8);
        Ok(())
    }

    pub fn total_cells(&self) -> usize {
        (self.grid.cols() * self.grid.rows()) as usize
    }

    pub fn screened_cells(&self) -> usize {
        self.screened.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn progress(&self) -> f64 {
        self.screened_cells() as f64 / self.total_cells() as f64
    }

    /// Wire form used by the REST API.
    pub fn state(&self) -> ScreeningState {
        ScreeningState {
            id: self.id,
            image_id: self.image_id,
            patch_w: self.grid.patch_w,
            patch_h: self.grid.patch_h,
            cols: self.grid.cols(),
            rows: self.grid.rows(),
            screened: base64::engine::general_purpose::STANDARD.encode(&self.screened),
            current: [self.current.0, self.current.1],
            current_rect: self
                .grid
                .patch_rect(self.current.0, self.current.1)
                .expect("current cell in range"),
            progress: self.progress(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningState {
    pub id: ScreeningMapId,
    pub image_id: ImageId,
    pub patch_w: u32,
    pub patch_h: u32,
    pub cols: u32,
    pub rows: u32,
    /// Base64 of the packed row-major bitset.
    pub screened: String,
    pub current: [u32; 2],
    pub current_rect: PatchRect,
    pub progress: f64,
}

impl Instance {
    /// Returns the caller's map for an image, creating it on first use.
    /// Registering a different patch size starts the map over.
    pub fn open_screening_map(&self, actor: Actor, image_id: ImageId, patch_w: u32, patch_h: u32) -> Result<ScreeningMap> {
        let user = actor
            .user()
            .ok_or_else(|| Error::InvalidInput("screening maps belong to a user".into()))?;
        let mut db = self.db.write();
        let t = &db.tables;
        let image = t.images.get(&image_id).ok_or(Error::NotFound("image", image_id.0))?;
        t.require(actor, Right::Read, Resource::Image(image_id))?;
        let existing = t
            .screening
            .values()
            .find(|m| m.image_id == image_id && m.user_id == user);
        if let Some(m) = existing {
            if (m.grid.patch_w, m.grid.patch_h) == (patch_w, patch_h) {
                return Ok(m.clone());
            }
        }
        let grid = compute_grid(image.width, image.height, patch_w, patch_h, SCREENING_OVERLAP)?;
        let cells = (grid.cols() * grid.rows()) as usize;
        let map = ScreeningMap {
            id: existing.map_or(ScreeningMapId(t.next.screening + 1), |m| m.id),
            image_id,
            user_id: user,
            grid,
            screened: vec![0; cells.div_ceil(8)],
            current: (0, 0),
            created_at: self.now(),
        };
        db.commit(vec![Row::Screening(map.clone())])?;
        Ok(map)
    }

    fn own_map(&self, actor: Actor, id: ScreeningMapId) -> Result<ScreeningMap> {
        let db = self.db.read();
        let m = db
            .tables
            .screening
            .get(&id)
            .filter(|m| actor == Actor::System || actor.user() == Some(m.user_id))
            .ok_or(Error::NotFound("screening map", id.0))?;
        db.tables.require(actor, Right::Read, Resource::Image(m.image_id))?;
        Ok(m.clone())
    }

    pub fn screening_map_for(&self, actor: Actor, image_id: ImageId) -> Result<ScreeningMap> {
        let user = actor.user().ok_or(Error::NotFound("screening map", 0))?;
        let id = self
            .db
            .read()
            .tables
            .screening
            .values()
            .find(|m| m.image_id == image_id && m.user_id == user)
            .map(|m| m.id)
            .ok_or(Error::NotFound("screening map", 0))?;
        self.own_map(actor, id)
    }

    /// Idempotently flags a cell as screened and returns the new progress.
    pub fn mark_screened(&self, actor: Actor, id: ScreeningMapId, col: u32, row: u32) -> Result<(ScreeningMap, f64)> {
        let mut m = self.own_map(actor, id)?;
        m.set(col, row)?;
        let mut db = self.db.write();
        // Re-read so concurrent marks on the same map are not lost.
        let mut current = db.tables.screening.get(&id).cloned().unwrap_or(m.clone());
        for (dst, src) in current.screened.iter_mut().zip(&m.screened) {
            *dst |= *src;
        }
        m = current;
        db.commit(vec![Row::Screening(m.clone())])?;
        let p = m.progress();
        Ok((m, p))
    }

    pub fn record_position(&self, actor: Actor, id: ScreeningMapId, col: u32, row: u32) -> Result<()> {
        let m = self.own_map(actor, id)?;
        m.index(col, row)?;
        let mut db = self.db.write();
        let mut m = db.tables.screening.get(&id).cloned().unwrap_or(m);
        m.current = (col, row);
        db.commit(vec![Row::Screening(m)])?;
        Ok(())
    }

    pub fn resume(&self, actor: Actor, id: ScreeningMapId) -> Result<ScreeningState> {
        Ok(self.own_map(actor, id)?.state())
    }
}
