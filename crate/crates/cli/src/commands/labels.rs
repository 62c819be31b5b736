//! `labels import`: validated append to the ground-truth manifest.

use std::path::Path;

use anyhow::{bail, Context};
use chrono::{DateTime, Utc};
use pvscan_core::model::{GroundTruthLabel, LocationLabel, QuantityBucket};
use pvscan_core::ndjson;
use serde::Deserialize;
use serde_json::json;

use super::emit;
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord, Stage};

/// One line of an import file. Vocabulary values must be canonical.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportLine {
    tile_id: String,
    #[serde(alias = "solar_panels_present")]
    present: bool,
    location: LocationLabel,
    quantity: QuantityBucket,
    annotator: Option<String>,
    annotated_at: Option<DateTime<Utc>>,
}

pub fn parse_import(
    text: &str,
    default_annotator: &str,
) -> Result<Vec<GroundTruthLabel>, Vec<String>> {
    let now = Utc::now();
    let mut labels = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ImportLine>(line)
            .map_err(|e| e.to_string())
            .and_then(|l| {
                let label = GroundTruthLabel {
                    tile_id: l.tile_id,
                    present: l.present,
                    location: l.location,
                    quantity: l.quantity,
                    annotator: l.annotator.unwrap_or_else(|| default_annotator.to_string()),
                    annotated_at: l.annotated_at.unwrap_or(now),
                };
                label.validate().map(|_| label).map_err(|e| e.to_string())
            });
        match parsed {
            Ok(l) => labels.push(l),
            Err(e) => errors.push(format!("line {}: {e}", i + 1)),
        }
    }
    if errors.is_empty() {
        Ok(labels)
    } else {
        Err(errors)
    }
}

/// All-or-nothing: one invalid line aborts the import.
pub fn import(data: &DataDir, config: Config, file: &Path, annotator: &str) -> anyhow::Result<()> {
    let text =
        std::fs::read_to_string(file).with_context(|| format!("cannot read {}", file.display()))?;
    let labels = match parse_import(&text, annotator) {
        Ok(l) => l,
        Err(errors) => {
            for e in &errors {
                eprintln!("{e}");
            }
            bail!(
                "{} invalid line(s) in {}; nothing imported",
                errors.len(),
                file.display()
            );
        }
    };
    let _lock = data.lock()?;
    let mut run = RunRecord::start(Stage::LabelsImport, config.snapshot());
    let known: std::collections::HashSet<String> = data
        .tile_records()?
        .into_iter()
        .map(|t| t.tile_id)
        .collect();
    let unknown = labels
        .iter()
        .filter(|l| !known.contains(&l.tile_id))
        .count();
    if unknown > 0 {
        log::warn!("{unknown} label(s) refer to tiles not in the tile manifest");
    }
    ndjson::append(&data.labels(), &labels)?;
    run.count("imported", labels.len())
        .count("unknown_tiles", unknown);
    let run = run.finish(data)?;
    emit(&run, json!({}));
    Ok(())
}
