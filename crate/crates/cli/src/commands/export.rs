//! `export-finetune`: train/test JSONL files from labeled tiles.

use std::collections::HashMap;

use anyhow::bail;
use pvscan_core::finetune::{
    export_jsonl, file_sha256, split_dataset, validate_jsonl, ExportManifest, ExportPrompt,
};
use pvscan_core::imagery::Tile;
use pvscan_core::model::GroundTruthLabel;
use pvscan_core::ndjson::write_atomic;
use serde_json::json;

use super::{emit, load_prompt};
use crate::cli::ExportArgs;
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord, Stage};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn export(data: &DataDir, mut config: Config, args: ExportArgs) -> anyhow::Result<()> {
    if let Some(r) = args.ratio {
        config.export.ratio = r;
    }
    if let Some(s) = args.seed {
        config.export.seed = s;
    }
    if let Some(p) = args.profile {
        config.export.profile = p;
    }
    if args.no_stratify {
        config.export.stratified = false;
    }
    if let Some(k) = args.k {
        config.prompt.k = k;
    }
    config.validate()?;
    let (template, examples) = load_prompt(&config)?;
    if config.prompt.k > examples.len() {
        bail!(
            "k = {} but the example bank has {} examples",
            config.prompt.k,
            examples.len()
        );
    }

    let _lock = data.lock()?;
    let mut run = RunRecord::start(Stage::Export, config.snapshot());
    let tiles: HashMap<String, _> = data
        .tile_records()?
        .into_iter()
        .map(|t| (t.tile_id.clone(), t))
        .collect();
    // Only tiles whose imagery is present can be exported.
    let labels: Vec<GroundTruthLabel> = data
        .labels_latest()?
        .into_values()
        .filter(|l| tiles.contains_key(&l.tile_id))
        .collect();
    let split = split_dataset(
        &labels,
        config.export.ratio,
        config.export.seed,
        config.export.stratified,
    )?;
    let truths: HashMap<String, GroundTruthLabel> =
        labels.into_iter().map(|l| (l.tile_id.clone(), l)).collect();
    let load = |id: &str| -> Option<Tile> {
        let rec = tiles.get(id)?;
        match data.load_tile(rec) {
            Ok(t) => Some(t),
            Err(e) => {
                log::error!("{e:#}");
                None
            }
        }
    };
    let prompt = ExportPrompt {
        template: &template,
        examples: &examples,
        k: config.prompt.k,
    };
    let profile = config.export.profile;
    let dir = data.export_dir();
    let train_path = dir.join(TRAIN_FILE);
    let test_path = dir.join(TEST_FILE);
    export_jsonl(
        &split.train_ids,
        &load,
        &truths,
        &prompt,
        profile,
        &train_path,
    )?;
    export_jsonl(
        &split.test_ids,
        &load,
        &truths,
        &prompt,
        profile,
        &test_path,
    )?;

    let mut invalid = 0;
    for path in [&train_path, &test_path] {
        let report = validate_jsonl(path, profile)?;
        for e in &report.errors {
            log::error!("{}:{}: {:?} {}", path.display(), e.line, e.kind, e.message);
        }
        invalid += report.lines - report.valid;
    }
    let manifest = ExportManifest {
        seed: split.seed,
        ratio: split.ratio,
        stratified: split.stratified,
        profile,
        k: config.prompt.k,
        template_version: template.version.clone(),
        train_count: split.train_ids.len(),
        test_count: split.test_ids.len(),
        train_file: TRAIN_FILE.into(),
        test_file: TEST_FILE.into(),
        train_sha256: file_sha256(&train_path)?,
        test_sha256: file_sha256(&test_path)?,
    };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;

    run.count("train", manifest.train_count)
        .count("test", manifest.test_count)
        .count("invalid_lines", invalid);
    let run = run.finish(data)?;
    emit(
        &run,
        json!({"dir": dir, "train_sha256": manifest.train_sha256, "test_sha256": manifest.test_sha256}),
    );
    if invalid > 0 {
        bail!("{invalid} exported line(s) failed validation");
    }
    Ok(())
}
