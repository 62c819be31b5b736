use image::{GenericImage, GenericImageView, RgbaImage};

use super::{ImageryError, SceneImage, Tile};

/// Tiles per side.
pub const GRID: u32 = 4;

pub fn tile_id(scene_id: &str, row: u32, col: u32) -> String {
    format!("{scene_id}_{row}_{col}")
}

/// Row-major index to `(row, col)`.
pub fn tile_position(index: u32) -> (u32, u32) {
    (index / GRID, index % GRID)
}

/// Cuts the scene into 16 equal tiles in row-major order.
pub fn slice_scene(scene: &SceneImage) -> Vec<Tile> {
    let tw = scene.width_px() / GRID;
    let th = scene.height_px() / GRID;
    (0..GRID * GRID)
        .map(|index| {
            let (row, col) = tile_position(index);
            let raster = scene.raster.view(col * tw, row * th, tw, th).to_image();
            Tile {
                tile_id: tile_id(&scene.scene_id, row, col),
                scene_id: scene.scene_id.clone(),
                row,
                col,
                raster,
            }
        })
        .collect()
}

/// Inverse of [`slice_scene`]: stitches 16 same-sized tiles back together.
pub fn reassemble(tiles: &[Tile]) -> Result<RgbaImage, ImageryError> {
    if tiles.len() != (GRID * GRID) as usize {
        return Err(ImageryError::IncompleteGrid(format!(
            "{} tiles",
            tiles.len()
        )));
    }
    let (tw, th) = tiles[0].raster.dimensions();
    let mut seen = [false; (GRID * GRID) as usize];
    let mut out = RgbaImage::new(tw * GRID, th * GRID);
    for t in tiles {
        if t.row >= GRID || t.col >= GRID {
            return Err(ImageryError::IncompleteGrid(format!(
                "cell ({}, {})",
                t.row, t.col
            )));
        }
        if t.raster.dimensions() != (tw, th) {
            return Err(ImageryError::IncompleteGrid("tile sizes differ".into()));
        }
        let idx = (t.row * GRID + t.col) as usize;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(ImageryError::IncompleteGrid(format!(
                "duplicate cell ({}, {})",
                t.row, t.col
            )));
        }
        out.copy_from(&t.raster, t.col * tw, t.row * th)
            .map_err(|e| ImageryError::IncompleteGrid(e.to_string()))?;
    }
    Ok(out)
}
