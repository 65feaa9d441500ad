//! Deep-zoom tile pyramids.
//!
//! Level `max_level` holds the source at full resolution, every lower level
//! is the ceil-halved level above it (2x2 box average), down to a single
//! pixel at level 0. Each level is cut into 256 px tiles without overlap;
//! edge tiles are smaller. Tiles are materialized when an image is ingested
//! and stored as PNG under `{root}/{image_id}/{frame}/{level}/{col}_{row}.png`.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, ImageEncoder, ImageFormat, RgbaImage};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::ImageId;

pub const TILE_SIZE: u32 = 256;

const MANIFEST: &str = "pyramid.json";

/// Extensions of vendor slide containers this engine refuses to ingest.
const VENDOR_EXTENSIONS: &[&str] = &[
    "svs", "ndpi", "isyntax", "czi", "mrxs", "scn", "vms", "vmu", "bif", "dcm",
];

#[derive(Debug, Error)]
pub enum TileError {
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("tile storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("tile out of range")]
    TileOutOfRange,
    #[error("level {level} out of range (max {max_level})")]
    LevelOutOfRange { level: u32, max_level: u32 },
    #[error("no pyramid for image {0}")]
    ImageNotFound(ImageId),
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (u32, u32),
        got: (u32, u32),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileFormat {
    Png,
    Jpeg,
}

impl TileFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            TileFormat::Png => "image/png",
            TileFormat::Jpeg => "image/jpeg",
        }
    }

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "png" => Some(TileFormat::Png),
            "jpg" | "jpeg" => Some(TileFormat::Jpeg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileAddress {
    pub image_id: ImageId,
    pub frame: u32,
    pub level: u32,
    pub col: u32,
    pub row: u32,
    pub format: TileFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pyramid {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub max_level: u32,
    pub tile_size: u32,
    /// `(width, height)` indexed by level.
    pub level_dims: Vec<(u32, u32)>,
}

impl Pyramid {
    pub fn grid(&self, level: u32) -> Result<(u32, u32), TileError> {
        let (w, h) = *self
            .level_dims
            .get(level as usize)
            .ok_or(TileError::LevelOutOfRange {
                level,
                max_level: self.max_level,
            })?;
        Ok(tile_grid(w, h))
    }
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub bytes: Vec<u8>,
    pub content_type: &'static str,
}

/// `ceil(log2(max(width, height)))`.
pub fn max_level(width: u32, height: u32) -> u32 {
    let m = width.max(height);
    if m <= 1 {
        0
    } else {
        32 - (m - 1).leading_zeros()
    }
}

/// Dimensions of `level`, obtained by repeated ceil-halving of the source.
pub fn level_dimensions(width: u32, height: u32, level: u32) -> Result<(u32, u32), TileError> {
    let top = max_level(width, height);
    if level > top {
        return Err(TileError::LevelOutOfRange {
            level,
            max_level: top,
        });
    }
    let (mut w, mut h) = (width, height);
    for _ in level..top {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    Ok((w, h))
}

/// Number of tile columns and rows covering a `width x height` level.
pub fn tile_grid(width: u32, height: u32) -> (u32, u32) {
    (width.div_ceil(TILE_SIZE), height.div_ceil(TILE_SIZE))
}

/// Halves an image with a 2x2 box filter. Odd edges average the pixels
/// that exist; the mean is rounded half up.
pub fn downscale(src: &RgbaImage) -> RgbaImage {
    let (w, h) = src.dimensions();
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    RgbaImage::from_fn(nw, nh, |x, y| {
        let mut sum = [0u32; 4];
        let mut n = 0u32;
        for sy in (2 * y)..(2 * y + 2).min(h) {
            for sx in (2 * x)..(2 * x + 2).min(w) {
                let p = src.get_pixel(sx, sy).0;
                for c in 0..4 {
                    sum[c] += p[c] as u32;
                }
                n += 1;
            }
        }
        image::Rgba(sum.map(|s| ((s + n / 2) / n) as u8))
    })
}

pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>, TileError> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Adaptive)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgba8)
        .map_err(|e| TileError::Decode(e.to_string()))?;
    Ok(out)
}

fn encode_jpeg(img: &RgbaImage) -> Result<Vec<u8>, TileError> {
    let rgb = DynamicImage::ImageRgba8(img.clone()).to_rgb8();
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, 90)
        .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| TileError::Decode(e.to_string()))?;
    Ok(out)
}

/// Decodes an uploaded raster into one RGBA buffer per frame.
///
/// PNG, JPEG, BMP and (multi-page) TIFF are accepted. Vendor slide
/// containers are rejected by extension even when they happen to be TIFF
/// based.
pub fn decode_raster(bytes: &[u8], file_name: &str) -> Result<Vec<RgbaImage>, TileError> {
    let ext = Path::new(file_name)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if VENDOR_EXTENSIONS.contains(&ext.as_str()) {
        return Err(TileError::UnsupportedFormat(ext));
    }
    let format = image::guess_format(bytes)
        .map_err(|_| TileError::UnsupportedFormat(file_name.to_string()))?;
    match format {
        ImageFormat::Tiff => decode_tiff_pages(bytes),
        ImageFormat::Png | ImageFormat::Jpeg | ImageFormat::Bmp => {
            let img = image::load_from_memory_with_format(bytes, format)
                .map_err(|e| TileError::Decode(e.to_string()))?;
            Ok(vec![img.to_rgba8()])
        }
        other => Err(TileError::UnsupportedFormat(format!("{other:?}"))),
    }
}

fn decode_tiff_pages(bytes: &[u8]) -> Result<Vec<RgbaImage>, TileError> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::ColorType;

    let err = |e: tiff::TiffError| TileError::Decode(e.to_string());
    let mut dec = Decoder::new(Cursor::new(bytes)).map_err(err)?;
    let mut frames = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(err)?;
        let color = dec.colortype().map_err(err)?;
        let DecodingResult::U8(buf) = dec.read_image().map_err(err)? else {
            return Err(TileError::UnsupportedFormat(format!("tiff sample type for {color:?}")));
        };
        let rgba = match color {
            ColorType::RGBA(8) => RgbaImage::from_raw(w, h, buf),
            ColorType::RGB(8) => image::RgbImage::from_raw(w, h, buf)
                .map(|i| DynamicImage::ImageRgb8(i).to_rgba8()),
            ColorType::Gray(8) => image::GrayImage::from_raw(w, h, buf)
                .map(|i| DynamicImage::ImageLuma8(i).to_rgba8()),
            ColorType::GrayA(8) => image::GrayAlphaImage::from_raw(w, h, buf)
                .map(|i| DynamicImage::ImageLumaA8(i).to_rgba8()),
            other => {
                return Err(TileError::UnsupportedFormat(format!("tiff color type {other:?}")))
            }
        }
        .ok_or_else(|| TileError::Decode("truncated tiff page".into()))?;
        frames.push(rgba);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(err)?;
    }
    Ok(frames)
}

/// On-disk pyramid storage.
///
/// Builds write into a private staging directory which is renamed into
/// place once complete, so readers never observe a partial pyramid.
#[derive(Debug)]
pub struct TileStore {
    root: PathBuf,
    cache: RwLock<HashMap<ImageId, Arc<Pyramid>>>,
}

impl TileStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, TileError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            cache: RwLock::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn build_pyramid(&self, image_id: ImageId, pixels: &RgbaImage) -> Result<Pyramid, TileError> {
        self.ingest_frames(image_id, std::slice::from_ref(pixels))
    }

    /// One pyramid per frame, all published together.
    pub fn ingest_frames(&self, image_id: ImageId, frames: &[RgbaImage]) -> Result<Pyramid, TileError> {
        let first = frames
            .first()
            .ok_or_else(|| TileError::Decode("no frames".into()))?;
        let (width, height) = first.dimensions();
        if width == 0 || height == 0 {
            return Err(TileError::Decode("empty raster".into()));
        }
        for (index, f) in frames.iter().enumerate() {
            if f.dimensions() != (width, height) {
                return Err(TileError::DimensionMismatch {
                    index,
                    expected: (width, height),
                    got: f.dimensions(),
                });
            }
        }

        let top = max_level(width, height);
        let pyramid = Pyramid {
            image_id,
            width,
            height,
            frame_count: frames.len() as u32,
            max_level: top,
            tile_size: TILE_SIZE,
            level_dims: (0..=top)
                .map(|l| level_dimensions(width, height, l))
                .collect::<Result<_, _>>()?,
        };

        let staging = self.root.join(format!(
            ".staging-{image_id}-{}",
            rand::random::<u64>()
        ));
        let result = (|| {
            for (frame, pixels) in frames.iter().enumerate() {
                let mut level_img = pixels.clone();
                for level in (0..=top).rev() {
                    write_level(&staging.join(frame.to_string()).join(level.to_string()), &level_img)?;
                    if level > 0 {
                        level_img = downscale(&level_img);
                    }
                }
            }
            fs::write(
                staging.join(MANIFEST),
                serde_json::to_vec_pretty(&pyramid).expect("pyramid serializes"),
            )?;
            fs::rename(&staging, self.image_dir(image_id))?;
            Ok(())
        })();
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        self.cache.write().insert(image_id, Arc::new(pyramid.clone()));
        Ok(pyramid)
    }

    fn image_dir(&self, image_id: ImageId) -> PathBuf {
        self.root.join(image_id.to_string())
    }

    pub fn pyramid(&self, image_id: ImageId) -> Result<Arc<Pyramid>, TileError> {
        if let Some(p) = self.cache.read().get(&image_id) {
            return Ok(p.clone());
        }
        let raw = fs::read(self.image_dir(image_id).join(MANIFEST))
            .map_err(|_| TileError::ImageNotFound(image_id))?;
        let p: Pyramid =
            serde_json::from_slice(&raw).map_err(|e| TileError::Decode(e.to_string()))?;
        let p = Arc::new(p);
        self.cache.write().insert(image_id, p.clone());
        Ok(p)
    }

    pub fn get_tile(&self, addr: TileAddress) -> Result<Tile, TileError> {
        let p = self.pyramid(addr.image_id)?;
        if addr.frame >= p.frame_count {
            return Err(TileError::TileOutOfRange);
        }
        let (cols, rows) = p.grid(addr.level)?;
        if addr.col >= cols || addr.row >= rows {
            return Err(TileError::TileOutOfRange);
        }
        let path = self.tile_path(addr.image_id, addr.frame, addr.level, addr.col, addr.row);
        let png = fs::read(path)?;
        let bytes = match addr.format {
            TileFormat::Png => png,
            TileFormat::Jpeg => {
                let img = image::load_from_memory_with_format(&png, ImageFormat::Png)
                    .map_err(|e| TileError::Decode(e.to_string()))?;
                encode_jpeg(&img.to_rgba8())?
            }
        };
        Ok(Tile {
            bytes,
            content_type: addr.format.content_type(),
        })
    }

    fn tile_path(&self, image_id: ImageId, frame: u32, level: u32, col: u32, row: u32) -> PathBuf {
        self.image_dir(image_id)
            .join(frame.to_string())
            .join(level.to_string())
            .join(format!("{col}_{row}.png"))
    }

    /// Pixels of `(x, y, w, h)` at `level`, stitched from the stored tiles.
    pub fn read_region(
        &self,
        image_id: ImageId,
        frame: u32,
        level: u32,
        (x, y, w, h): (u32, u32, u32, u32),
    ) -> Result<RgbaImage, TileError> {
        let p = self.pyramid(image_id)?;
        let (lw, lh) = *p
            .level_dims
            .get(level as usize)
            .ok_or(TileError::LevelOutOfRange {
                level,
                max_level: p.max_level,
            })?;
        if frame >= p.frame_count || w == 0 || h == 0 || x + w > lw || y + h > lh {
            return Err(TileError::TileOutOfRange);
        }
        let mut out = RgbaImage::new(w, h);
        for row in y / TILE_SIZE..=(y + h - 1) / TILE_SIZE {
            for col in x / TILE_SIZE..=(x + w - 1) / TILE_SIZE {
                let png = fs::read(self.tile_path(image_id, frame, level, col, row))?;
                let tile = image::load_from_memory_with_format(&png, ImageFormat::Png)
                    .map_err(|e| TileError::Decode(e.to_string()))?
                    .to_rgba8();
                let (tx, ty) = (col * TILE_SIZE, row * TILE_SIZE);
                for (px, py, pixel) in tile.enumerate_pixels() {
                    let (gx, gy) = (tx + px, ty + py);
                    if gx >= x && gx < x + w && gy >= y && gy < y + h {
                        out.put_pixel(gx - x, gy - y, *pixel);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn remove(&self, image_id: ImageId) -> Result<(), TileError> {
        self.cache.write().remove(&image_id);
        match fs::remove_dir_all(self.image_dir(image_id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}

fn write_level(dir: &Path, img: &RgbaImage) -> Result<(), TileError> {
    fs::create_dir_all(dir)?;
    let (w, h) = img.dimensions();
    let (cols, rows) = tile_grid(w, h);
    for row in 0..rows {
        for col in 0..cols {
            let (x, y) = (col * TILE_SIZE, row * TILE_SIZE);
            let tile = image::imageops::crop_imm(
                img,
                x,
                y,
                TILE_SIZE.min(w - x),
                TILE_SIZE.min(h - y),
            )
            .to_image();
            fs::write(dir.join(format!("{col}_{row}.png")), encode_png(&tile)?)?;
        }
    }
    Ok(())
}
