//! Satellite scenes, their 4x4 tiling, the thirds-grid region geometry and
//! raster encoding.

mod codec;
pub mod fetch;
mod geometry;
mod slicing;
pub mod synth;

pub use codec::{
    decode_image_payload, decode_png, encode_image_payload, encode_png, PNG_MEDIA_TYPE,
};
pub use geometry::{region_for_centroid, NormalizedPoint};
pub use slicing::{reassemble, slice_scene, tile_id, tile_position, GRID};

use chrono::{DateTime, Utc};
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::GeoPoint;

pub const DEFAULT_SCENE_SIZE: u32 = 640;
pub const DEFAULT_ZOOM: u8 = 20;

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("invalid raster dimensions {width}x{height}: {reason}")]
    InvalidDimensions {
        width: u32,
        height: u32,
        reason: &'static str,
    },
    #[error("encode failed: {0}")]
    Encode(String),
    #[error("decode failed: {0}")]
    Decode(String),
    #[error("point ({x}, {y}) outside the unit square")]
    OutOfRange { x: f64, y: f64 },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("tiles do not form a complete 4x4 grid: {0}")]
    IncompleteGrid(String),
}

/// Content hash of a raster: dimensions plus raw RGBA bytes.
pub fn raster_digest(raster: &RgbaImage) -> String {
    let mut h = Sha256::new();
    h.update(raster.width().to_le_bytes());
    h.update(raster.height().to_le_bytes());
    h.update(raster.as_raw());
    hex::encode(&h.finalize()[..8])
}

/// One fetched (or synthesized) map image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub scene_id: String,
    pub center: GeoPoint,
    pub zoom: u8,
    pub fetched_at: DateTime<Utc>,
    pub region_name: String,
    pub raster: RgbaImage,
}

impl SceneImage {
    pub fn new(
        raster: RgbaImage,
        center: GeoPoint,
        zoom: u8,
        region_name: impl Into<String>,
        fetched_at: DateTime<Utc>,
    ) -> Result<Self, ImageryError> {
        let (width, height) = raster.dimensions();
        if width == 0 || height == 0 {
            return Err(ImageryError::InvalidDimensions {
                width,
                height,
                reason: "empty raster",
            });
        }
        if width % GRID != 0 || height % GRID != 0 {
            return Err(ImageryError::InvalidDimensions {
                width,
                height,
                reason: "sides must be divisible by 4",
            });
        }
        Ok(Self {
            scene_id: raster_digest(&raster),
            center,
            zoom,
            fetched_at,
            region_name: region_name.into(),
            raster,
        })
    }

    pub fn width_px(&self) -> u32 {
        self.raster.width()
    }

    pub fn height_px(&self) -> u32 {
        self.raster.height()
    }

    pub fn record(&self) -> SceneRecord {
        SceneRecord {
            scene_id: self.scene_id.clone(),
            center: self.center,
            zoom: self.zoom,
            width_px: self.width_px(),
            height_px: self.height_px(),
            fetched_at: self.fetched_at,
            region_name: self.region_name.clone(),
        }
    }
}

/// Scene manifest entry; the raster lives at `scenes/<scene_id>.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub center: GeoPoint,
    pub zoom: u8,
    pub width_px: u32,
    pub height_px: u32,
    pub fetched_at: DateTime<Utc>,
    pub region_name: String,
}

/// One cell of a scene's 4x4 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub tile_id: String,
    pub scene_id: String,
    pub row: u32,
    pub col: u32,
    pub raster: RgbaImage,
}

impl Tile {
    pub fn width_px(&self) -> u32 {
        self.raster.width()
    }

    pub fn height_px(&self) -> u32 {
        self.raster.height()
    }

    pub fn record(&self, region_name: &str) -> TileRecord {
        TileRecord {
            tile_id: self.tile_id.clone(),
            scene_id: self.scene_id.clone(),
            row: self.row,
            col: self.col,
            width_px: self.width_px(),
            height_px: self.height_px(),
            region_name: region_name.to_string(),
        }
    }
}

/// Tile manifest entry; the raster lives at `tiles/<scene_id>/<row>_<col>.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: String,
    pub scene_id: String,
    pub row: u32,
    pub col: u32,
    pub width_px: u32,
    pub height_px: u32,
    pub region_name: String,
}

impl TileRecord {
    pub fn relative_path(&self) -> String {
        format!("tiles/{}/{}_{}.png", self.scene_id, self.row, self.col)
    }
}

/// Axis-aligned panel footprint in tile-normalized coordinates, y downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PanelRect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, ImageryError> {
        let r = Self { x0, y0, x1, y1 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), ImageryError> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !(unit(self.x0) && unit(self.y0) && unit(self.x1) && unit(self.y1)) {
            return Err(ImageryError::InvalidSpec(format!(
                "{self:?} leaves the unit square"
            )));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(ImageryError::InvalidSpec(format!(
                "{self:?} is empty or inverted"
            )));
        }
        Ok(())
    }
}
