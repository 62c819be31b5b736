//! Deterministic rooftop scenes with known panel layouts, used as ground truth
//! for closed-loop tests of the whole pipeline.
//!
//! Backgrounds are warm or neutral roof tones (blue never exceeds red), with
//! occasional gray shadows and bright blue pools as distractors. Panels are
//! dark blue-gray with a lighter cell grid.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{region_for_centroid, slicing, ImageryError, PanelRect, SceneImage, GRID};
use crate::geo::GeoPoint;
use crate::model::{bucket_for_count, GroundTruthLabel, LocationLabel, QuantityBucket};

pub const MAX_PANELS_PER_TILE: usize = 20;

/// Minimum background gap, in pixels, the random layout keeps between panels.
const LAYOUT_GAP_PX: i64 = 3;

const ROOF_PALETTE: [[u8; 3]; 5] = [
    [168, 112, 92],
    [150, 146, 140],
    [196, 184, 160],
    [132, 108, 90],
    [176, 170, 162],
];
const PANEL_BASE: [u8; 3] = [38, 50, 84];
const PANEL_GRID: [u8; 3] = [58, 70, 108];
const SHADOW_BASE: [u8; 3] = [62, 60, 56];
const POOL_BASE: [u8; 3] = [92, 170, 216];

/// Exact ground truth for one synthesized tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileTruth {
    pub count: usize,
    pub rects: Vec<PanelRect>,
    pub location: LocationLabel,
    pub quantity: QuantityBucket,
}

impl TileTruth {
    pub fn present(&self) -> bool {
        self.count > 0
    }

    pub fn to_label(&self, tile_id: &str, annotator: &str, at: DateTime<Utc>) -> GroundTruthLabel {
        GroundTruthLabel {
            tile_id: tile_id.to_string(),
            present: self.present(),
            location: self.location,
            quantity: self.quantity,
            annotator: annotator.to_string(),
            annotated_at: at,
        }
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)` covered by a rect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PixelBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl PixelBox {
    fn of(r: &PanelRect, w: u32, h: u32) -> Self {
        let px = |v: f64, side: u32| ((v * side as f64).round() as u32).min(side);
        Self {
            x0: px(r.x0, w),
            y0: px(r.y0, h),
            x1: px(r.x1, w),
            y1: px(r.y1, h),
        }
    }

    fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }

    /// True when the boxes overlap or share an edge or corner.
    fn touches(&self, o: &PixelBox) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }
}

fn validate_tile(rects: &[PanelRect], w: u32, h: u32) -> Result<Vec<PixelBox>, ImageryError> {
    if rects.len() > MAX_PANELS_PER_TILE {
        return Err(ImageryError::InvalidSpec(format!(
            "{} panels in one tile (max {MAX_PANELS_PER_TILE})",
            rects.len()
        )));
    }
    let mut boxes = Vec::with_capacity(rects.len());
    for r in rects {
        r.validate()?;
        let b = PixelBox::of(r, w, h);
        if b.area() == 0 {
            return Err(ImageryError::InvalidSpec(format!("{r:?} covers no pixels")));
        }
        if let Some(other) = boxes.iter().find(|o: &&PixelBox| o.touches(&b)) {
            return Err(ImageryError::InvalidSpec(format!(
                "{r:?} overlaps or touches another panel at {other:?}"
            )));
        }
        boxes.push(b);
    }
    Ok(boxes)
}

fn truth_for(rects: &[PanelRect], boxes: &[PixelBox], w: u32, h: u32) -> TileTruth {
    if boxes.is_empty() {
        return TileTruth {
            count: 0,
            rects: Vec::new(),
            location: LocationLabel::NotApplicable,
            quantity: QuantityBucket::NotApplicable,
        };
    }
    // Area-weighted mean of pixel centers over all painted pixels.
    let (mut area, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for b in boxes {
        let a = b.area() as f64;
        area += a;
        sx += a * f64::from(b.x0 + b.x1) / 2.0;
        sy += a * f64::from(b.y0 + b.y1) / 2.0;
    }
    let location = region_for_centroid(sx / area / f64::from(w), sy / area / f64::from(h))
        .expect("centroid of in-tile pixels is in the unit square");
    TileTruth {
        count: boxes.len(),
        rects: rects.to_vec(),
        location,
        quantity: bucket_for_count(boxes.len() as u64),
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> [i32; 3] {
    let n = rng.random_range(-amount..=amount);
    [
        i32::from(base[0]) + n + rng.random_range(-2..=2),
        i32::from(base[1]) + n + rng.random_range(-2..=2),
        i32::from(base[2]) + n + rng.random_range(-2..=2),
    ]
}

fn put(img: &mut RgbaImage, x: u32, y: u32, [r, g, b]: [i32; 3]) {
    let c = |v: i32| v.clamp(0, 255) as u8;
    img.put_pixel(x, y, Rgba([c(r), c(g), c(b), 255]));
}

/// Paints a `w` x `h` tile; panel pixel boxes must already be validated.
fn render_tile(boxes: &[PixelBox], w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbaImage {
    let roof = ROOF_PALETTE[rng.random_range(0..ROOF_PALETTE.len())];
    let stripe = rng.random_range(5..=9);
    let mut img = RgbaImage::new(w, h);
    for y in 0..h {
        let shade = if y % stripe == 0 { -10 } else { 0 };
        for x in 0..w {
            let [r, g, b] = jitter(rng, roof, 16);
            put(&mut img, x, y, [r + shade, g + shade, b.min(r) + shade]);
        }
    }

    let mut blob = |rng: &mut ChaCha8Rng, base: [u8; 3], keep_b_below_r: bool| {
        let bw = rng.random_range(w / 10..=w / 3).max(1);
        let bh = rng.random_range(h / 10..=h / 3).max(1);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let [r, g, b] = jitter(rng, base, 6);
                let b = if keep_b_below_r { b.min(r) } else { b };
                put(&mut img, x, y, [r, g, b]);
            }
        }
    };
    if rng.random_bool(0.35) {
        blob(rng, SHADOW_BASE, true);
    }
    if rng.random_bool(0.15) {
        blob(rng, POOL_BASE, false);
    }

    for b in boxes {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let on_grid = (x - b.x0) % 5 == 4 || (y - b.y0) % 5 == 4;
                let base = if on_grid { PANEL_GRID } else { PANEL_BASE };
                put(&mut img, x, y, jitter(rng, base, 4));
            }
        }
    }
    img
}

/// Renders a single tile with the given panels.
pub fn synthesize_tile(
    rects: &[PanelRect],
    size: u32,
    seed: u64,
) -> Result<(RgbaImage, TileTruth), ImageryError> {
    if size == 0 {
        return Err(ImageryError::InvalidSpec(
            "tile size must be positive".into(),
        ));
    }
    let boxes = validate_tile(rects, size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = render_tile(&boxes, size, size, &mut rng);
    Ok((img, truth_for(rects, &boxes, size, size)))
}

/// Renders a `size` x `size` scene whose tiles carry the given panel layouts
/// (row-major, at most 16 entries; missing entries are empty tiles).
///
/// Returns the scene plus exact ground truth keyed by tile id.
pub fn synthesize_scene(
    layout: &[Vec<PanelRect>],
    size: u32,
    seed: u64,
) -> Result<(SceneImage, BTreeMap<String, TileTruth>), ImageryError> {
    if size == 0 || !size.is_multiple_of(GRID) {
        return Err(ImageryError::InvalidSpec(format!(
            "scene size {size} not divisible by 4"
        )));
    }
    let cells = (GRID * GRID) as usize;
    if layout.len() > cells {
        return Err(ImageryError::InvalidSpec(format!(
            "{} tile layouts (max 16)",
            layout.len()
        )));
    }
    let tile_px = size / GRID;
    let empty = Vec::new();
    let per_tile: Vec<(&[PanelRect], Vec<PixelBox>)> = (0..cells)
        .map(|i| {
            let rects = layout.get(i).unwrap_or(&empty).as_slice();
            validate_tile(rects, tile_px, tile_px).map(|b| (rects, b))
        })
        .collect::<Result<_, _>>()?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut raster = RgbaImage::new(size, size);
    for (i, (_, boxes)) in per_tile.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let tile = render_tile(boxes, tile_px, tile_px, &mut rng);
        let (row, col) = slicing::tile_position(i as u32);
        image::imageops::replace(
            &mut raster,
            &tile,
            i64::from(col * tile_px),
            i64::from(row * tile_px),
        );
    }

    // Fake but stable coordinates so synthesized scenes look like fetched ones.
    let center = GeoPoint {
        lat: (seed % 180) as f64 - 89.5,
        lon: (seed % 360) as f64 - 179.5,
    };
    let fetched_at = DateTime::<Utc>::UNIX_EPOCH;
    let scene = SceneImage::new(raster, center, super::DEFAULT_ZOOM, "synthetic", fetched_at)?;

    let truth = per_tile
        .iter()
        .enumerate()
        .map(|(i, (rects, boxes))| {
            let (row, col) = slicing::tile_position(i as u32);
            (
                slicing::tile_id(&scene.scene_id, row, col),
                truth_for(rects, boxes, tile_px, tile_px),
            )
        })
        .collect();
    Ok((scene, truth))
}

fn random_panel_count(rng: &mut impl Rng) -> usize {
    match rng.random_range(0..4) {
        0 => 1,
        1 => rng.random_range(2..=5),
        2 => rng.random_range(6..=10),
        _ => rng.random_range(11..=14),
    }
}

/// Places up to `count` well-separated panels on a `tile_px` tile. Fewer may
/// be placed when the tile fills up.
fn random_tile(rng: &mut impl Rng, tile_px: u32, count: usize) -> Vec<PanelRect> {
    let (lo, hi) = match count {
        1 => (0.12, 0.38),
        2..=5 => (0.09, 0.22),
        6..=10 => (0.075, 0.16),
        _ => (0.065, 0.125),
    };
    let side = f64::from(tile_px);
    let mut placed: Vec<(i64, i64, i64, i64)> = Vec::with_capacity(count);
    for _ in 0..500 {
        if placed.len() == count {
            break;
        }
        let w = ((rng.random_range(lo..hi) * side).round() as i64).max(2);
        let h = ((rng.random_range(lo..hi) * side).round() as i64).max(2);
        let x0 = rng.random_range(0..=i64::from(tile_px) - w);
        let y0 = rng.random_range(0..=i64::from(tile_px) - h);
        let candidate = (x0, y0, x0 + w, y0 + h);
        let clear = placed.iter().all(|&(a0, b0, a1, b1)| {
            candidate.0 >= a1 + LAYOUT_GAP_PX
                || a0 >= candidate.2 + LAYOUT_GAP_PX
                || candidate.1 >= b1 + LAYOUT_GAP_PX
                || b0 >= candidate.3 + LAYOUT_GAP_PX
        });
        if clear {
            placed.push(candidate);
        }
    }
    placed
        .into_iter()
        .map(|(x0, y0, x1, y1)| PanelRect {
            x0: x0 as f64 / side,
            y0: y0 as f64 / side,
            x1: x1 as f64 / side,
            y1: y1 as f64 / side,
        })
        .collect()
}

/// A full 16-tile layout mixing empty tiles (with probability
/// `empty_fraction`) and every quantity bucket.
pub fn random_layout(rng: &mut impl Rng, tile_px: u32, empty_fraction: f64) -> Vec<Vec<PanelRect>> {
    (0..GRID * GRID)
        .map(|_| {
            if rng.random_bool(empty_fraction.clamp(0.0, 1.0)) {
                Vec::new()
            } else {
                let count = random_panel_count(rng);
                random_tile(rng, tile_px, count)
            }
        })
        .collect()
}
