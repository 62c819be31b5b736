use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbaImage};

use super::{ImageryError, Tile};

pub const PNG_MEDIA_TYPE: &str = "image/png";

pub fn encode_png(raster: &RgbaImage) -> Result<Vec<u8>, ImageryError> {
    if raster.width() == 0 || raster.height() == 0 {
        return Err(ImageryError::Encode("empty raster".into()));
    }
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(
            raster.as_raw(),
            raster.width(),
            raster.height(),
            ExtendedColorType::Rgba8,
        )
        .map_err(|e| ImageryError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage, ImageryError> {
    image::load(Cursor::new(bytes), ImageFormat::Png)
        .map(|img| img.to_rgba8())
        .map_err(|e| ImageryError::Decode(e.to_string()))
}

/// Standard base64 of the tile's PNG encoding.
pub fn encode_image_payload(tile: &Tile) -> Result<String, ImageryError> {
    Ok(STANDARD.encode(encode_png(&tile.raster)?))
}

pub fn decode_image_payload(payload: &str) -> Result<RgbaImage, ImageryError> {
    let bytes = STANDARD
        .decode(payload.trim())
        .map_err(|e| ImageryError::Decode(format!("base64: {e}")))?;
    decode_png(&bytes)
}
