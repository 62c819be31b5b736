//! Deterministic pixel heuristic standing in for the remote model.
//!
//! Candidate pixels are dark and blue-leaning. 4-connected components smaller
//! than 0.2% of the tile are discarded; the rest are panels.

use image::RgbaImage;

use crate::imagery::{region_for_centroid, Tile};
use crate::model::{bucket_for_count, LocationLabel, PvAssessment, QuantityBucket};

/// Luminance ceiling for panel pixels (0..255 scale).
pub const MAX_PANEL_LUMA: f64 = 100.0;
/// Blue must exceed red by more than this.
pub const MIN_BLUE_EXCESS: i32 = 15;
pub const MIN_AREA_FRACTION: f64 = 0.002;

const LIKELIHOOD_MIDPOINT: f64 = 0.001;
const LIKELIHOOD_STEEPNESS: f64 = 2000.0;
const CONTRAST_SCALE: f64 = 0.1;

fn luma(p: &image::Rgba<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

fn is_candidate(p: &image::Rgba<u8>) -> bool {
    let (r, g, b) = (i32::from(p[0]), i32::from(p[1]), i32::from(p[2]));
    luma(p) < MAX_PANEL_LUMA && b > r + MIN_BLUE_EXCESS && b > g
}

/// Components of candidate pixels, each as a list of linear pixel indices.
fn components(raster: &RgbaImage) -> Vec<Vec<usize>> {
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let mask: Vec<bool> = raster.pixels().map(is_candidate).collect();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(comp);
    }
    out
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean luminance of the non-panel ring around the panels minus the mean
/// luminance of the panels, scaled to [0, 1].
fn boundary_contrast(raster: &RgbaImage, panel: &[bool]) -> f64 {
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let lum = |i: usize| luma(raster.get_pixel((i % w) as u32, (i / w) as u32));
    let (mut inside, mut n_in, mut ring, mut n_ring) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..w * h {
        if panel[i] {
            inside += lum(i);
            n_in += 1;
            continue;
        }
        let (x, y) = (i % w, i / w);
        let touches = (x > 0 && panel[i - 1])
            || (x + 1 < w && panel[i + 1])
            || (y > 0 && panel[i - w])
            || (y + 1 < h && panel[i + w]);
        if touches {
            ring += lum(i);
            n_ring += 1;
        }
    }
    if n_in == 0 || n_ring == 0 {
        return 0.0;
    }
    ((ring / n_ring as f64 - inside / n_in as f64) / 255.0).clamp(0.0, 1.0)
}

pub fn assess_raster(raster: &RgbaImage) -> PvAssessment {
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let total = (w * h).max(1);
    let min_area = (MIN_AREA_FRACTION * total as f64).ceil() as usize;
    let panels: Vec<Vec<usize>> = components(raster)
        .into_iter()
        .filter(|c| c.len() >= min_area.max(1))
        .collect();

    let area: usize = panels.iter().map(Vec::len).sum();
    let likelihood =
        logistic(LIKELIHOOD_STEEPNESS * (area as f64 / total as f64 - LIKELIHOOD_MIDPOINT));

    if panels.is_empty() {
        // No components: contrast is how far the tile's mean luminance sits
        // above the panel luminance ceiling.
        let mean = raster.pixels().map(luma).sum::<f64>() / total as f64;
        let contrast = ((mean - MAX_PANEL_LUMA) / 255.0).clamp(0.0, 1.0);
        return PvAssessment {
            present: false,
            location: LocationLabel::NotApplicable,
            quantity: QuantityBucket::NotApplicable,
            likelihood,
            confidence: 1.0 - (-contrast / CONTRAST_SCALE).exp(),
        };
    }

    let mut panel_mask = vec![false; w * h];
    let (mut sx, mut sy) = (0.0, 0.0);
    for &i in panels.iter().flatten() {
        panel_mask[i] = true;
        sx += (i % w) as f64 + 0.5;
        sy += (i / w) as f64 + 0.5;
    }
    let location = region_for_centroid(sx / area as f64 / w as f64, sy / area as f64 / h as f64)
        .expect("centroid lies inside the tile");
    let contrast = boundary_contrast(raster, &panel_mask);
    PvAssessment {
        present: true,
        location,
        quantity: bucket_for_count(panels.len() as u64),
        likelihood,
        confidence: 1.0 - (-contrast / CONTRAST_SCALE).exp(),
    }
}

pub fn mock_oracle_assess(tile: &Tile) -> PvAssessment {
    assess_raster(&tile.raster)
}
