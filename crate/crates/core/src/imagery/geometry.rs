use crate::model::LocationLabel;

use super::ImageryError;

/// Point in tile-normalized coordinates, y growing downward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

/// 0, 1 or 2 for the first, middle or last third. A point exactly on a cut
/// belongs to the lower band.
fn band(v: f64) -> u8 {
    if v * 3.0 <= 1.0 {
        0
    } else if v * 3.0 <= 2.0 {
        1
    } else {
        2
    }
}

/// Thirds-grid region containing `(x, y)`. Never returns `NA`.
pub fn region_for_centroid(x: f64, y: f64) -> Result<LocationLabel, ImageryError> {
    let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
    if !unit(x) || !unit(y) {
        return Err(ImageryError::OutOfRange { x, y });
    }
    use LocationLabel::*;
    Ok(match (band(y), band(x)) {
        (0, 0) => TopLeft,
        (0, 1) => Top,
        (0, _) => TopRight,
        (1, 0) => Left,
        (1, 1) => Center,
        (1, _) => Right,
        (_, 0) => BottomLeft,
        (_, 1) => Bottom,
        (_, _) => BottomRight,
    })
}
