//! `predict`: run tiles through a backend and append to the journal.

use std::collections::{HashMap, HashSet};

use anyhow::bail;
use pvscan_core::imagery::encode_image_payload;
use pvscan_core::inference::{build_backend, run_batch, BatchOptions, BatchSummary};
use pvscan_core::prompting::{assemble_prompt_with, PromptOptions};
use pvscan_core::retry::RetryPolicy;
use serde_json::json;

use super::{emit, load_prompt};
use crate::cli::PredictArgs;
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord, Stage};

/// Tiles are loaded and run in chunks of this many to bound memory.
const CHUNK: usize = 256;

pub fn predict(data: &DataDir, mut config: Config, args: PredictArgs) -> anyhow::Result<()> {
    if let Some(b) = args.backend {
        config.backend.kind = b;
    }
    if let Some(k) = args.k {
        config.prompt.k = k;
    }
    if let Some(t) = args.temperature {
        config.prompt.temperature = t;
    }
    if let Some(p) = args.parallelism {
        config.backend.parallelism = p;
    }
    if args.fixtures.is_some() {
        config.backend.fixtures_dir = args.fixtures;
    }
    if args.example_images {
        config.prompt.example_images = true;
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
    let backend = build_backend(&config.backend)?;

    let _lock = data.lock()?;
    let mut run = RunRecord::start(Stage::Predict, config.snapshot());
    let records: Vec<_> = data
        .tile_records()?
        .into_iter()
        .filter(|t| args.region.as_ref().is_none_or(|r| &t.region_name == r))
        .collect();
    if records.is_empty() {
        bail!("no tiles to assess; run `pvscan slice` or `pvscan synth` first");
    }

    // Successful records per tile, by prompt hash.
    let mut done: HashMap<String, HashSet<String>> = HashMap::new();
    if !args.force {
        for r in data.journal_records()? {
            if r.failure.is_none() {
                done.entry(r.tile_id).or_default().insert(r.bundle_hash);
            }
        }
    }

    let prompt = PromptOptions {
        temperature: config.prompt.temperature,
        example_images: config.prompt.example_images,
    };
    let opts = BatchOptions {
        parallelism: config.backend.parallelism,
        k: config.prompt.k,
        prompt: prompt.clone(),
        retry: match config.backend.kind {
            pvscan_core::inference::BackendKind::Remote => RetryPolicy::default(),
            _ => RetryPolicy::immediate(1),
        },
    };

    let mut total = BatchSummary::default();
    let mut skipped = 0;
    for chunk in records.chunks(CHUNK) {
        let mut tiles = Vec::with_capacity(chunk.len());
        for rec in chunk {
            let tile = data.load_tile(rec)?;
            if let Some(hashes) = done.get(&tile.tile_id) {
                let payload = encode_image_payload(&tile)?;
                let bundle = assemble_prompt_with(&template, &examples, opts.k, &payload, &prompt)?;
                if hashes.contains(&bundle.bundle_hash) {
                    skipped += 1;
                    continue;
                }
            }
            tiles.push(tile);
        }
        if tiles.is_empty() {
            continue;
        }
        let (_, summary) = run_batch(
            backend.as_ref(),
            &tiles,
            &template,
            &examples,
            &opts,
            Some(&data.journal()),
        )?;
        total.total += summary.total;
        total.ok += summary.ok;
        total.repaired += summary.repaired;
        total.rejected += summary.rejected;
        total.failed += summary.failed;
    }

    run.count("tiles", records.len())
        .count("skipped_current", skipped)
        .count("assessed", total.total)
        .count("ok", total.ok)
        .count("repaired", total.repaired)
        .count("rejected", total.rejected)
        .count("failed", total.failed);
    let run = run.finish(data)?;
    emit(
        &run,
        json!({"backend": config.backend.kind, "journal": data.journal()}),
    );
    if total.total > 0 && total.failed == total.total {
        bail!("every request failed; see the journal for details");
    }
    Ok(())
}
