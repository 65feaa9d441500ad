//! Shared domain types: images, sets, templates, products, annotations and
//! the canonical JSON annotation vector.
//!
//! Annotation geometry lives in [`AnnotationVector`], which serializes its
//! coordinates as a flat JSON object with keys `x1, y1, x2, y2, ...` in that
//! exact order. Boxes and circles are stored as their bounding box, lines as
//! their two end points and polygons as `n >= 3` vertices. Image-level
//! (global) labels carry an empty object.

use std::fmt;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::ids::*;

/// Geometry validation failures.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VectorError {
    #[error("coordinate outside of the image bounds")]
    OutOfBounds,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("malformed coordinate keys: {0}")]
    MalformedKeys(String),
    #[error("vector kind {0} does not support this operation")]
    UnsupportedKind(VectorKind),
    #[error("template has no default size")]
    MissingDefaultSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorKind {
    Box,
    Polygon,
    Line,
    Circle,
    Global,
}

impl VectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorKind::Box => "box",
            VectorKind::Polygon => "polygon",
            VectorKind::Line => "line",
            VectorKind::Circle => "circle",
            VectorKind::Global => "global",
        }
    }
}

impl fmt::Display for VectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "box" => VectorKind::Box,
            "polygon" => VectorKind::Polygon,
            "line" => VectorKind::Line,
            "circle" => VectorKind::Circle,
            "global" => VectorKind::Global,
            other => return Err(format!("unknown vector kind {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle in level-0 pixel space, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x1 <= other.x2 && other.x1 <= self.x2 && self.y1 <= other.y2 && other.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Typed annotation geometry in image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationVector {
    kind: VectorKind,
    points: Vec<Point>,
}

impl AnnotationVector {
    /// Builds a vector from points without bounds checks. Structural rules
    /// (point count, box ordering) are still enforced.
    pub fn new(kind: VectorKind, points: Vec<Point>) -> Result<Self, VectorError> {
        let v = Self { kind, points };
        v.check_structure()?;
        Ok(v)
    }

    pub fn rect(kind: VectorKind, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, VectorError> {
        Self::new(kind, vec![Point::new(x1, y1), Point::new(x2, y2)])
    }

    pub fn global() -> Self {
        Self {
            kind: VectorKind::Global,
            points: Vec::new(),
        }
    }

    /// Parses a coordinate object (`{"x1":..,"y1":..}`) for the given kind.
    pub fn from_coords(kind: VectorKind, coords: &Value) -> Result<Self, VectorError> {
        let obj = coords
            .as_object()
            .ok_or_else(|| VectorError::MalformedKeys("coordinates must be a JSON object".into()))?;
        let n = obj.len() / 2;
        if obj.len() % 2 != 0 {
            return Err(VectorError::MalformedKeys("unpaired coordinate key".into()));
        }
        let mut points = Vec::with_capacity(n);
        for i in 1..=n {
            let x = coord(obj, 'x', i)?;
            let y = coord(obj, 'y', i)?;
            points.push(Point::new(x, y));
        }
        Self::new(kind, points)
    }

    pub fn kind(&self) -> VectorKind {
        self.kind
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    fn check_structure(&self) -> Result<(), VectorError> {
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(VectorError::MalformedKeys("coordinates must be finite".into()));
        }
        match self.kind {
            VectorKind::Global if !self.points.is_empty() => Err(VectorError::MalformedKeys(
                "global annotations carry no coordinates".into(),
            )),
            VectorKind::Global => Ok(()),
            VectorKind::Polygon if self.points.len() < 3 => {
                Err(VectorError::DegenerateGeometry("polygon needs at least 3 vertices"))
            }
            VectorKind::Polygon => Ok(()),
            VectorKind::Box | VectorKind::Circle | VectorKind::Line if self.points.len() != 2 => {
                Err(VectorError::MalformedKeys(format!(
                    "{} expects exactly x1,y1,x2,y2",
                    self.kind
                )))
            }
            VectorKind::Box | VectorKind::Circle => {
                let (a, b) = (self.points[0], self.points[1]);
                if a.x >= b.x || a.y >= b.y {
                    Err(VectorError::DegenerateGeometry("requires x1 < x2 and y1 < y2"))
                } else {
                    Ok(())
                }
            }
            VectorKind::Line => Ok(()),
        }
    }

    /// Checks every coordinate against `[0, width] x [0, height]`.
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<(), VectorError> {
        let (w, h) = (width as f64, height as f64);
        if self
            .points
            .iter()
            .all(|p| (0.0..=w).contains(&p.x) && (0.0..=h).contains(&p.y))
        {
            Ok(())
        } else {
            Err(VectorError::OutOfBounds)
        }
    }

    /// Bounding box of the geometry. Global annotations cover the whole image.
    pub fn bounding_box(&self, width: u32, height: u32) -> Rect {
        if self.points.is_empty() {
            return Rect::new(0.0, 0.0, width as f64, height as f64);
        }
        let mut r = Rect::new(f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &self.points {
            r.x1 = r.x1.min(p.x);
            r.y1 = r.y1.min(p.y);
            r.x2 = r.x2.max(p.x);
            r.y2 = r.y2.max(p.y);
        }
        r
    }

    /// Same geometry shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            kind: self.kind,
            points: self
                .points
                .iter()
                .map(|p| Point::new(p.x + dx, p.y + dy))
                .collect(),
        }
    }

    /// Canonical coordinate object, e.g. `{"x1":10,"y1":10,"x2":50,"y2":40}`.
    pub fn coords_json(&self) -> String {
        serde_json::to_string(&Coords(&self.points)).expect("coordinates serialize")
    }

    pub fn coords_value(&self) -> Value {
        serde_json::to_value(Coords(&self.points)).expect("coordinates serialize")
    }

    /// Serializer for embedding the coordinate object in other structs.
    pub fn serialize_coords<S: Serializer>(v: &AnnotationVector, s: S) -> Result<S::Ok, S::Error> {
        Coords(&v.points).serialize(s)
    }
}

fn coord(obj: &serde_json::Map<String, Value>, axis: char, i: usize) -> Result<f64, VectorError> {
    let key = format!("{axis}{i}");
    match obj.get(&key) {
        Some(Value::Number(n)) => n
            .as_f64()
            .ok_or_else(|| VectorError::MalformedKeys(format!("{key} is not representable"))),
        Some(_) => Err(VectorError::MalformedKeys(format!("{key} is not a number"))),
        None => Err(VectorError::MalformedKeys(format!("missing key {key}"))),
    }
}

/// Integral values are written as JSON integers so `75.0` round-trips as `75`.
fn number(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        Value::from(v as i64)
    } else {
        Value::from(v)
    }
}

struct Coords<'a>(&'a [Point]);

impl Serialize for Coords<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len() * 2))?;
        for (i, p) in self.0.iter().enumerate() {
            map.serialize_entry(&format!("x{}", i + 1), &number(p.x))?;
            map.serialize_entry(&format!("y{}", i + 1), &number(p.y))?;
        }
        map.end()
    }
}

impl Serialize for AnnotationVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(2))?;
        map.serialize_entry("kind", &self.kind)?;
        map.serialize_entry("coords", &Coords(&self.points))?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for AnnotationVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            kind: VectorKind,
            coords: Value,
        }
        let raw = Raw::deserialize(d)?;
        AnnotationVector::from_coords(raw.kind, &raw.coords).map_err(D::Error::custom)
    }
}

/// Parses and validates a coordinate object against the host image size.
pub fn validate_vector(
    kind: VectorKind,
    coords: &Value,
    image_w: u32,
    image_h: u32,
) -> Result<AnnotationVector, VectorError> {
    let v = AnnotationVector::from_coords(kind, coords)?;
    v.check_bounds(image_w, image_h)?;
    Ok(v)
}

/// 32-bit FNV-1a over the raw bytes.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    const OFFSET: u32 = 0x811c_9dc5;
    const PRIME: u32 = 0x0100_0193;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u32).wrapping_mul(PRIME))
}

/// Public image name `yymmdd-hhmm-xxxx`: upload minute plus the low 16 bits
/// of the FNV-1a hash of the original file name, as lowercase hex.
pub fn pseudonymize_name(private_name: &str, upload_time: NaiveDateTime) -> String {
    format!(
        "{}-{:04x}",
        upload_time.format("%y%m%d-%H%M"),
        fnv1a32(private_name.as_bytes()) & 0xffff
    )
}

/// Whether `name` has the shape of a generated public name.
pub fn is_public_name(name: &str) -> bool {
    let b = name.as_bytes();
    b.len() == 16
        && b[..6].iter().all(u8::is_ascii_digit)
        && b[6] == b'-'
        && b[7..11].iter().all(u8::is_ascii_digit)
        && b[11] == b'-'
        && b[12..]
            .iter()
            .all(|c| c.is_ascii_digit() || (b'a'..=b'f').contains(c))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub id: ImageId,
    /// Original file name. Never leaves the instance.
    pub private_name: Option<String>,
    pub public_name: String,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub image_set_id: ImageSetId,
    /// Base URL of the owning instance for federated images.
    pub owner_instance: Option<String>,
    pub remote: Option<crate::federation::RemoteImageRef>,
    pub created_at: DateTime<Utc>,
}

impl ImageRecord {
    pub fn is_local(&self) -> bool {
        self.owner_instance.is_none()
    }
}

/// Visibility and completion rules for annotators working on a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AnnotationMode {
    #[default]
    Cooperative,
    Blind,
    SecondOpinion { required_verifications: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageSet {
    pub id: ImageSetId,
    pub name: String,
    pub team_id: TeamId,
    pub description: String,
    pub product_ids: Vec<ProductId>,
    pub image_ids: Vec<ImageId>,
    pub is_virtual: bool,
    #[serde(default)]
    pub mode: AnnotationMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub user_id: UserId,
    pub verdict: Verdict,
    pub at: DateTime<Utc>,
}

/// Where an imported annotation came from: `(source instance, source id)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub instance: String,
    pub source_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub template_id: TemplateId,
    pub vector: AnnotationVector,
    pub creator_id: UserId,
    pub last_editor_id: UserId,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub meta: Value,
    pub deleted: bool,
    pub verifications: Vec<Verification>,
    pub media_ids: Vec<MediaId>,
    #[serde(default)]
    pub origin: Option<Origin>,
}

impl AnnotationRecord {
    pub fn accept_count(&self) -> usize {
        self.verifications
            .iter()
            .filter(|v| v.verdict == Verdict::Accept)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTemplate {
    pub id: TemplateId,
    pub name: String,
    pub vector_kind: VectorKind,
    /// `#rrggbb`
    pub color: String,
    pub shortcut: Option<char>,
    pub sort_order: i32,
    pub default_width: Option<u32>,
    pub default_height: Option<u32>,
    pub example_image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: ProductId,
    pub name: String,
    pub description: String,
    pub template_ids: Vec<TemplateId>,
}

pub fn is_hex_color(s: &str) -> bool {
    s.len() == 7 && s.starts_with('#') && s[1..].bytes().all(|c| c.is_ascii_hexdigit())
}

/// Box or circle of the template's default size centred on a click. The
/// shape is shifted back inside the image when it would cross an edge, and
/// only shrinks when the default size exceeds the image itself.
pub fn single_click_vector(
    template: &AnnotationTemplate,
    click_x: f64,
    click_y: f64,
    image_w: u32,
    image_h: u32,
) -> Result<AnnotationVector, VectorError> {
    if !matches!(template.vector_kind, VectorKind::Box | VectorKind::Circle) {
        return Err(VectorError::UnsupportedKind(template.vector_kind));
    }
    let (Some(dw), Some(dh)) = (template.default_width, template.default_height) else {
        return Err(VectorError::MissingDefaultSize);
    };
    if dw == 0 || dh == 0 {
        return Err(VectorError::MissingDefaultSize);
    }
    if !(0.0..=image_w as f64).contains(&click_x) || !(0.0..=image_h as f64).contains(&click_y) {
        return Err(VectorError::OutOfBounds);
    }
    let (x1, x2) = centered_span(click_x, dw, image_w);
    let (y1, y2) = centered_span(click_y, dh, image_h);
    AnnotationVector::rect(template.vector_kind, x1, y1, x2, y2)
}

fn centered_span(center: f64, size: u32, limit: u32) -> (f64, f64) {
    if size >= limit {
        return (0.0, limit as f64);
    }
    let start = (center - size as f64 / 2.0).floor();
    let start = start.clamp(0.0, (limit - size) as f64);
    (start, start + size as f64)
}
