//! Synthetic scenes with exact labels, for closed-loop testing.

use std::collections::BTreeMap;

use anyhow::{bail, Context};
use chrono::DateTime;
use pvscan_core::geo::GeoPoint;
use pvscan_core::imagery::synth::{random_layout, synthesize_scene};
use pvscan_core::imagery::{encode_png, slice_scene, GRID};
use pvscan_core::model::GroundTruthLabel;
use pvscan_core::ndjson;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{emit, upsert};
use crate::cli::SynthArgs;
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord, Stage};

pub const SYNTH_ANNOTATOR: &str = "synth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub scenes: usize,
    pub scene_size: u32,
    /// Probability that a tile has no panels.
    pub empty_fraction: f64,
    /// Region names assigned to scenes in turn.
    pub regions: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scenes: 13,
            scene_size: 640,
            empty_fraction: 0.4,
            regions: vec!["synthetic".into()],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.scenes == 0 {
            bail!("scenes must be positive");
        }
        if self.scene_size == 0 || !self.scene_size.is_multiple_of(GRID) {
            bail!(
                "scene_size {} must be positive and divisible by 4",
                self.scene_size
            );
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            bail!("empty_fraction {} is outside [0, 1]", self.empty_fraction);
        }
        if self.regions.is_empty() {
            bail!("regions must name at least one region");
        }
        Ok(())
    }
}

pub fn synth(data: &DataDir, config: Config, args: SynthArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("cannot read {}", args.spec.display()))?;
    let spec: SynthSpec = toml::from_str(&text)
        .with_context(|| format!("invalid synth spec {}", args.spec.display()))?;
    spec.validate()?;
    let _lock = data.lock()?;
    let mut snapshot = config.snapshot();
    snapshot["synth"] = json!({"spec": spec, "seed": args.seed});
    let mut run = RunRecord::start(Stage::Synth, snapshot);

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let tile_px = spec.scene_size / GRID;
    let mut scene_records = Vec::new();
    let mut tile_records = Vec::new();
    let mut labels = Vec::new();
    let mut empty = 0;
    for i in 0..spec.scenes {
        let layout = random_layout(&mut rng, tile_px, spec.empty_fraction);
        let (mut scene, truth) = synthesize_scene(
            &layout,
            spec.scene_size,
            args.seed.wrapping_mul(1_000_003) + i as u64,
        )?;
        scene.region_name = spec.regions[i % spec.regions.len()].clone();
        scene.center = GeoPoint {
            lat: i as f64 * 1e-3,
            lon: 0.0,
        };
        let path = data.scene_png(&scene.scene_id);
        std::fs::create_dir_all(path.parent().expect("scene path has a parent"))?;
        ndjson::write_atomic(&path, &encode_png(&scene.raster)?)?;
        for tile in slice_scene(&scene) {
            let record = tile.record(&scene.region_name);
            let out = data.tile_png(&record);
            std::fs::create_dir_all(out.parent().expect("tile path has a parent"))?;
            ndjson::write_atomic(&out, &encode_png(&tile.raster)?)?;
            let t = &truth[&tile.tile_id];
            if !t.present() {
                empty += 1;
            }
            labels.push(t.to_label(&tile.tile_id, SYNTH_ANNOTATOR, DateTime::UNIX_EPOCH));
            tile_records.push(record);
        }
        scene_records.push(scene.record());
    }

    upsert(&data.scenes_manifest(), scene_records, |r| {
        r.scene_id.clone()
    })?;
    upsert(&data.tiles_manifest(), tile_records, |r| r.tile_id.clone())?;
    // The label manifest is append-only: add a label only when it differs
    // from the tile's current one.
    let current: BTreeMap<String, GroundTruthLabel> = data.labels_latest()?;
    let fresh: Vec<GroundTruthLabel> = labels
        .iter()
        .filter(|l| current.get(&l.tile_id) != Some(l))
        .cloned()
        .collect();
    ndjson::append(&data.labels(), &fresh)?;

    run.count("scenes", spec.scenes)
        .count("tiles", labels.len())
        .count("empty_tiles", empty)
        .count("labels_added", fresh.len());
    let run = run.finish(data)?;
    emit(&run, json!({}));
    Ok(())
}
