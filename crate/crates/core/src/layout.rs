//! Synthetic navigable images built from annotation crops.
//!
//! * **Class grid**: every annotation of one template in a near-square
//!   grid of `ceil(sqrt(n))` columns, filled row-major.
//! * **Density map**: column = `floor(score / bin_width)`; crops sharing a
//!   column are stacked bottom-up in score order.
//! * **Cluster map**: crops placed at their min-max normalized 2D embedding
//!   cell; an occupied cell pushes the crop to the nearest free cell by
//!   Chebyshev distance, rings walked clockwise starting due east.
//!
//! Each map is registered as an ordinary image and gets a [`MapRegistry`]
//! that ties every cell back to its source annotation, so edits made on the
//! map can be replayed on the original data.

use std::collections::BTreeSet;
use std::fs;

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::access::{Actor, Resource, Right};
use crate::db::Row;
use crate::error::{Error, Result};
use crate::ids::*;
use crate::instance::Instance;
use crate::model::{AnnotationRecord, ImageRecord, Rect, Verdict};
use crate::store::AnnotationUpdate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("no annotations to lay out")]
    EmptyClass,
    #[error("score {0} outside of [0, 4]")]
    ScoreOutOfRange(f64),
    #[error("bin width must be positive")]
    BadBinWidth,
    #[error("canvas holds {cells} cells but {patches} patches were given")]
    CanvasTooSmall { cells: u64, patches: usize },
    #[error("map cell ({col}, {row}) is empty")]
    EmptyCell { col: u32, row: u32 },
    #[error("no graded cells in the field of view")]
    NoCellsInView,
    #[error("grade {0} outside of 0..=4")]
    GradeOutOfRange(i64),
    #[error("pixels of annotation {0} are not available on this instance")]
    SourceUnavailable(AnnotationId),
    #[error("cell size must be positive")]
    BadCellSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    ClassGrid,
    Density,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CellRect {
    pub fn overlaps(&self, o: &CellRect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub col: u32,
    pub row: u32,
    pub rect: CellRect,
    pub source_image_id: ImageId,
    pub source_annotation_id: AnnotationId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRegistry {
    pub map_image_id: ImageId,
    pub map_kind: MapKind,
    pub cell_size: u32,
    pub cols: u32,
    pub rows: u32,
    pub entries: Vec<RegistryEntry>,
}

impl MapRegistry {
    pub fn entry(&self, col: u32, row: u32) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.col == col && e.row == row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPatch {
    pub source_annotation_id: AnnotationId,
    pub patch_w: u32,
    pub patch_h: u32,
    pub point2d: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnnotation {
    pub annotation_id: AnnotationId,
    pub score: f64,
}

/// A correction made on a map cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Correction {
    Relabel { template_id: TemplateId },
    Delete,
    Verify { verdict: Verdict },
    /// Stores a corrected continuous score in the annotation's `meta.score`.
    Rescore { score: f64 },
}

/// `(columns, rows, cell per item)` of a row-major near-square grid.
pub fn class_grid_layout(n: usize) -> Result<(u32, u32, Vec<(u32, u32)>), LayoutError> {
    if n == 0 {
        return Err(LayoutError::EmptyClass);
    }
    let mut cols = (n as f64).sqrt().ceil() as usize;
    // Guard against sqrt rounding for large perfect squares.
    while cols * cols < n {
        cols += 1;
    }
    while cols > 1 && (cols - 1) * (cols - 1) >= n {
        cols -= 1;
    }
    let rows = n.div_ceil(cols);
    let cells = (0..n)
        .map(|i| ((i % cols) as u32, (i / cols) as u32))
        .collect();
    Ok((cols as u32, rows as u32, cells))
}

/// Histogram bin of each score.
pub fn density_bins(scores: &[f64], bin_width: f64) -> Result<Vec<u32>, LayoutError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(LayoutError::BadBinWidth);
    }
    scores
        .iter()
        .map(|&s| {
            if !(0.0..=4.0).contains(&s) {
                return Err(LayoutError::ScoreOutOfRange(s));
            }
            // The epsilon keeps decimal inputs such as 3.9 / 0.05 in bin 78.
            Ok((s / bin_width + 1e-9).floor() as u32)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityLayout {
    pub cols: u32,
    pub rows: u32,
    /// `(column, height in its stack)` per input, 0 = bottom of the stack.
    pub cells: Vec<(u32, u32)>,
}

/// Bins scores into columns and stacks equal bins by ascending score.
/// Ties keep input order.
pub fn density_layout(scores: &[f64], bin_width: f64) -> Result<DensityLayout, LayoutError> {
    if scores.is_empty() {
        return Err(LayoutError::EmptyClass);
    }
    let bins = density_bins(scores, bin_width)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let cols = (4.0 / bin_width + 1e-9).floor() as u32 + 1;
    let mut heights = vec![0u32; cols as usize];
    let mut cells = vec![(0, 0); scores.len()];
    for i in order {
        let col = bins[i];
        cells[i] = (col, heights[col as usize]);
        heights[col as usize] += 1;
    }
    Ok(DensityLayout {
        cols,
        rows: heights.into_iter().max().unwrap_or(0),
        cells,
    })
}

/// Offsets of the ring at Chebyshev distance `r`, clockwise from due east
/// (y grows downwards): down the right edge, left along the bottom, up the
/// left edge, right along the top, then down to just above east.
pub fn spiral_ring(r: i64) -> Vec<(i64, i64)> {
    if r == 0 {
        return vec![(0, 0)];
    }
    let mut out = Vec::with_capacity(8 * r as usize);
    out.extend((0..=r).map(|dy| (r, dy)));
    out.extend((-r..r).rev().map(|dx| (dx, r)));
    out.extend((-r..r).rev().map(|dy| (-r, dy)));
    out.extend((-r + 1..=r).map(|dx| (dx, -r)));
    out.extend((-r + 1..0).map(|dy| (r, dy)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub col: u32,
    pub row: u32,
    /// Ring distance moved away from the preferred cell.
    pub displacement: u32,
}

/// Places points on a `cols x rows` cell grid without collisions.
pub fn cluster_layout(points: &[(f64, f64)], cols: u32, rows: u32) -> Result<Vec<Placement>, LayoutError> {
    if points.is_empty() {
        return Err(LayoutError::EmptyClass);
    }
    let cells = cols as u64 * rows as u64;
    if cells < points.len() as u64 {
        return Err(LayoutError::CanvasTooSmall {
            cells,
            patches: points.len(),
        });
    }
    let quantize = |vals: &mut dyn Iterator<Item = f64>, n: u32| {
        let vals: Vec<f64> = vals.collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vals.into_iter()
            .map(|v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * (n - 1) as f64).round() as i64
                } else {
                    ((n - 1) / 2) as i64
                }
            })
            .collect::<Vec<_>>()
    };
    let cs = quantize(&mut points.iter().map(|p| p.0), cols);
    let rs = quantize(&mut points.iter().map(|p| p.1), rows);
    let mut occupied = vec![false; cells as usize];
    let max_r = cols.max(rows) as i64;
    let mut out = Vec::with_capacity(points.len());
    for (&c, &r) in cs.iter().zip(&rs) {
        let mut placed = None;
        'search: for radius in 0..=max_r {
            for (dx, dy) in spiral_ring(radius) {
                let (x, y) = (c + dx, r + dy);
                if x < 0 || y < 0 || x >= cols as i64 || y >= rows as i64 {
                    continue;
                }
                let idx = (y * cols as i64 + x) as usize;
                if !occupied[idx] {
                    occupied[idx] = true;
                    placed = Some(Placement {
                        col: x as u32,
                        row: y as u32,
                        displacement: radius as u32,
                    });
                    break 'search;
                }
            }
        }
        out.push(placed.expect("capacity checked above"));
    }
    Ok(out)
}

/// EIPH-style score: mean grade (0..=4) times 100.
pub fn field_of_view_score(grades: &[i64]) -> Result<f64, LayoutError> {
    if grades.is_empty() {
        return Err(LayoutError::NoCellsInView);
    }
    if let Some(&g) = grades.iter().find(|g| !(0..=4).contains(*g)) {
        return Err(LayoutError::GradeOutOfRange(g));
    }
    let sum: i64 = grades.iter().sum();
    Ok(100.0 * sum as f64 / grades.len() as f64)
}

/// Scales `crop` to fit a square cell, centred, preserving aspect.
fn letterbox(crop: &RgbaImage, cell: u32) -> RgbaImage {
    let (w, h) = crop.dimensions();
    let scale = (cell as f64 / w as f64).min(cell as f64 / h as f64);
    let (nw, nh) = (
        ((w as f64 * scale).round() as u32).clamp(1, cell),
        ((h as f64 * scale).round() as u32).clamp(1, cell),
    );
    let resized = if (nw, nh) == (w, h) {
        crop.clone()
    } else {
        image::imageops::resize(crop, nw, nh, image::imageops::FilterType::Triangle)
    };
    let mut out = RgbaImage::from_pixel(cell, cell, Rgba([255, 255, 255, 255]));
    image::imageops::overlay(&mut out, &resized, ((cell - nw) / 2) as i64, ((cell - nh) / 2) as i64);
    out
}

struct Source {
    annotation: AnnotationRecord,
    image: ImageRecord,
}

impl Instance {
    fn layout_sources(&self, actor: Actor, ids: &[AnnotationId]) -> Result<Vec<Source>> {
        let db = self.db.read();
        let t = &db.tables;
        ids.iter()
            .map(|id| {
                let a = t.visible_annotation(actor, *id, Right::Read)?;
                if a.deleted {
                    return Err(Error::Deleted(id.0));
                }
                Ok(Source {
                    annotation: a.clone(),
                    image: t.images[&a.image_id].clone(),
                })
            })
            .collect()
    }

    /// Pixels of `(x, y, w, h)` (level-0 coordinates) read from the lowest
    /// pyramid level at which the region still covers `cell` pixels.
    fn crop(&self, src: &Source, region: Rect, cell: u32) -> Result<RgbaImage> {
        if !src.image.is_local() {
            return Err(LayoutError::SourceUnavailable(src.annotation.id).into());
        }
        let p = self
            .tiles
            .pyramid(src.image.id)
            .map_err(|_| LayoutError::SourceUnavailable(src.annotation.id))?;
        let x1 = region.x1.floor().clamp(0.0, (p.width - 1) as f64) as u32;
        let y1 = region.y1.floor().clamp(0.0, (p.height - 1) as f64) as u32;
        let x2 = (region.x2.ceil() as u32).clamp(x1 + 1, p.width);
        let y2 = (region.y2.ceil() as u32).clamp(y1 + 1, p.height);
        let (w, h) = (x2 - x1, y2 - y1);
        let mut level = p.max_level;
        while level > 0 && (w.max(h) >> (p.max_level - level + 1)) >= cell {
            level -= 1;
        }
        let shift = p.max_level - level;
        let (lw, lh) = p.level_dims[level as usize];
        let lx1 = (x1 >> shift).min(lw - 1);
        let ly1 = (y1 >> shift).min(lh - 1);
        let lx2 = x2.div_ceil(1 << shift).clamp(lx1 + 1, lw);
        let ly2 = y2.div_ceil(1 << shift).clamp(ly1 + 1, lh);
        let pixels = self.tiles.read_region(
            src.image.id,
            0,
            level,
            (lx1, ly1, lx2 - lx1, ly2 - ly1),
        )?;
        Ok(letterbox(&pixels, cell))
    }

    fn annotation_crop(&self, src: &Source, cell: u32) -> Result<RgbaImage> {
        let bbox = src
            .annotation
            .vector
            .bounding_box(src.image.width, src.image.height);
        self.crop(src, bbox, cell)
    }

    fn publish_map(
        &self,
        actor: Actor,
        target_set: ImageSetId,
        name: &str,
        canvas: RgbaImage,
        mut registry: MapRegistry,
    ) -> Result<(ImageRecord, MapRegistry)> {
        let record = self.register_frames(actor, target_set, name, &[canvas], None)?;
        registry.map_image_id = record.id;
        let dir = self.storage_root().join("registries");
        fs::create_dir_all(&dir)?;
        fs::write(
            dir.join(format!("{}.registry.json", record.id)),
            serde_json::to_vec_pretty(&registry).expect("registry serializes"),
        )?;
        self.db.write().commit(vec![Row::Registry(registry.clone())])?;
        Ok((record, registry))
    }

    fn render(
        &self,
        sources: &[Source],
        cells: &[(u32, u32)],
        cols: u32,
        rows: u32,
        cell: u32,
        crop: impl Fn(&Source) -> Result<RgbaImage>,
    ) -> Result<(RgbaImage, Vec<RegistryEntry>)> {
        let mut canvas = RgbaImage::from_pixel(cols * cell, rows * cell, Rgba([255, 255, 255, 255]));
        let mut entries = Vec::with_capacity(sources.len());
        for (src, &(col, row)) in sources.iter().zip(cells) {
            let rect = CellRect {
                x: col * cell,
                y: row * cell,
                w: cell,
                h: cell,
            };
            image::imageops::replace(&mut canvas, &crop(src)?, rect.x as i64, rect.y as i64);
            entries.push(RegistryEntry {
                col,
                row,
                rect,
                source_image_id: src.image.id,
                source_annotation_id: src.annotation.id,
            });
        }
        Ok((canvas, entries))
    }

    /// Annotations of `template_id` in a set, excluding those drawn on maps.
    pub fn class_members(&self, actor: Actor, set: ImageSetId, template_id: TemplateId) -> Result<Vec<AnnotationId>> {
        let db = self.db.read();
        let t = &db.tables;
        let s = t.image_sets.get(&set).ok_or(Error::NotFound("image set", set.0))?;
        t.require(actor, Right::Read, Resource::ImageSet(set))?;
        let images: BTreeSet<ImageId> = s
            .image_ids
            .iter()
            .filter(|i| !t.registries.contains_key(i))
            .copied()
            .collect();
        let mut ids: Vec<AnnotationId> = images
            .iter()
            .flat_map(|i| t.by_image.get(i).into_iter().flatten())
            .map(|id| &t.annotations[id])
            .filter(|a| !a.deleted && a.template_id == template_id)
            .filter(|a| t.annotation_visible_to(actor, a))
            .map(|a| a.id)
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Grid of every annotation of one class in `set`, registered as a new
    /// image in `target_set`.
    pub fn build_class_grid(
        &self,
        actor: Actor,
        set: ImageSetId,
        template_id: TemplateId,
        cell_size: u32,
        target_set: ImageSetId,
    ) -> Result<(ImageRecord, MapRegistry)> {
        if cell_size == 0 {
            return Err(LayoutError::BadCellSize.into());
        }
        self.check_upload(actor, target_set)?;
        let template = self.template(template_id)?;
        let ids = self.class_members(actor, set, template_id)?;
        let (cols, rows, cells) = class_grid_layout(ids.len())?;
        let sources = self.layout_sources(actor, &ids)?;
        let (canvas, entries) =
            self.render(&sources, &cells, cols, rows, cell_size, |s| self.annotation_crop(s, cell_size))?;
        let registry = MapRegistry {
            map_image_id: ImageId(0),
            map_kind: MapKind::ClassGrid,
            cell_size,
            cols,
            rows,
            entries,
        };
        self.publish_map(actor, target_set, &format!("class-map-{}.png", template.name), canvas, registry)
    }

    /// Crops ordered by score along x and stacked along y.
    pub fn build_density_map(
        &self,
        actor: Actor,
        scored: &[ScoredAnnotation],
        bin_width: f64,
        cell_size: u32,
        target_set: ImageSetId,
    ) -> Result<(ImageRecord, MapRegistry)> {
        if cell_size == 0 {
            return Err(LayoutError::BadCellSize.into());
        }
        self.check_upload(actor, target_set)?;
        let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let layout = density_layout(&scores, bin_width)?;
        let ids: Vec<AnnotationId> = scored.iter().map(|s| s.annotation_id).collect();
        let sources = self.layout_sources(actor, &ids)?;
        let cells: Vec<(u32, u32)> = layout
            .cells
            .iter()
            .map(|&(col, height)| (col, layout.rows - 1 - height))
            .collect();
        let (canvas, entries) = self.render(&sources, &cells, layout.cols, layout.rows, cell_size, |s| {
            self.annotation_crop(s, cell_size)
        })?;
        let registry = MapRegistry {
            map_image_id: ImageId(0),
            map_kind: MapKind::Density,
            cell_size,
            cols: layout.cols,
            rows: layout.rows,
            entries,
        };
        self.publish_map(actor, target_set, "density-map.png", canvas, registry)
    }

    /// Crops placed by their 2D embedding without overlap.
    pub fn build_cluster_map(
        &self,
        actor: Actor,
        patches: &[EmbeddedPatch],
        canvas_w: u32,
        canvas_h: u32,
        cell: u32,
        target_set: ImageSetId,
    ) -> Result<(ImageRecord, MapRegistry)> {
        if cell == 0 {
            return Err(LayoutError::BadCellSize.into());
        }
        self.check_upload(actor, target_set)?;
        let (cols, rows) = (canvas_w / cell, canvas_h / cell);
        let points: Vec<(f64, f64)> = patches.iter().map(|p| p.point2d).collect();
        let placements = cluster_layout(&points, cols, rows)?;
        let ids: Vec<AnnotationId> = patches.iter().map(|p| p.source_annotation_id).collect();
        let sources = self.layout_sources(actor, &ids)?;
        let cells: Vec<(u32, u32)> = placements.iter().map(|p| (p.col, p.row)).collect();
        let (canvas, entries) = self.render(&sources, &cells, cols, rows, cell, |s| {
            let patch = patches
                .iter()
                .find(|p| p.source_annotation_id == s.annotation.id)
                .expect("source from patch list");
            let bbox = s.annotation.vector.bounding_box(s.image.width, s.image.height);
            let (cx, cy) = ((bbox.x1 + bbox.x2) / 2.0, (bbox.y1 + bbox.y2) / 2.0);
            let (pw, ph) = (patch.patch_w.max(1) as f64, patch.patch_h.max(1) as f64);
            let x1 = (cx - pw / 2.0).clamp(0.0, (s.image.width as f64 - pw).max(0.0));
            let y1 = (cy - ph / 2.0).clamp(0.0, (s.image.height as f64 - ph).max(0.0));
            self.crop(s, Rect::new(x1, y1, x1 + pw, y1 + ph), cell)
        })?;
        let registry = MapRegistry {
            map_image_id: ImageId(0),
            map_kind: MapKind::Cluster,
            cell_size: cell,
            cols,
            rows,
            entries,
        };
        self.publish_map(actor, target_set, "cluster-map.png", canvas, registry)
    }

    /// Registry of a map image, restricted to cells the caller may see.
    pub fn map_registry(&self, actor: Actor, map_image_id: ImageId) -> Result<MapRegistry> {
        let db = self.db.read();
        let t = &db.tables;
        let reg = t
            .registries
            .get(&map_image_id)
            .ok_or(Error::NotFound("map registry", map_image_id.0))?;
        t.require(actor, Right::Read, Resource::Image(map_image_id))?;
        let mut reg = reg.clone();
        reg.entries.retain(|e| {
            t.annotations
                .get(&e.source_annotation_id)
                .is_some_and(|a| t.annotation_visible_to(actor, a))
        });
        Ok(reg)
    }

    /// Replays a correction made on a map cell onto its source annotation.
    pub fn sync_correction(
        &self,
        actor: Actor,
        map_image_id: ImageId,
        col: u32,
        row: u32,
        correction: Correction,
    ) -> Result<AnnotationRecord> {
        let entry = {
            let db = self.db.read();
            let reg = db
                .tables
                .registries
                .get(&map_image_id)
                .ok_or(Error::NotFound("map registry", map_image_id.0))?;
            reg.entry(col, row)
                .cloned()
                .ok_or(LayoutError::EmptyCell { col, row })?
        };
        let id = entry.source_annotation_id;
        match correction {
            Correction::Relabel { template_id } => self.update_annotation(
                actor,
                id,
                AnnotationUpdate {
                    template_id: Some(template_id),
                    ..Default::default()
                },
            ),
            Correction::Delete => self.delete_annotation(actor, id),
            Correction::Verify { verdict } => {
                self.verify_annotation(actor, id, verdict)?;
                self.annotation(actor, id)
            }
            Correction::Rescore { score } => {
                if !(0.0..=4.0).contains(&score) {
                    return Err(LayoutError::ScoreOutOfRange(score).into());
                }
                let mut meta = self.annotation(actor, id)?.meta;
                if !meta.is_object() {
                    meta = Value::Object(Default::default());
                }
                meta["score"] = Value::from(score);
                self.update_annotation(
                    actor,
                    id,
                    AnnotationUpdate {
                        meta: Some(meta),
                        ..Default::default()
                    },
                )
            }
        }
    }

    /// Score over the visible annotations intersecting `viewport` that carry
    /// an integer `meta.grade`.
    pub fn eiph_score(&self, actor: Actor, image_id: ImageId, viewport: Rect) -> Result<f64> {
        let db = self.db.read();
        let t = &db.tables;
        let image = t.images.get(&image_id).ok_or(Error::NotFound("image", image_id.0))?;
        t.require(actor, Right::Read, Resource::Image(image_id))?;
        let grades: Vec<i64> = t
            .by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(|id| &t.annotations[id])
            .filter(|a| !a.deleted && t.annotation_visible_to(actor, a))
            .filter(|a| a.vector.bounding_box(image.width, image.height).intersects(&viewport))
            .filter_map(|a| a.meta.get("grade").and_then(Value::as_i64))
            .collect();
        Ok(field_of_view_score(&grades)?)
    }
}
