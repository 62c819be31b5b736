//! `triage`: auto labels for confident predictions, a review queue for the
//! rest.

use std::collections::BTreeMap;

use anyhow::Context;
use chrono::{DateTime, Utc};
use pvscan_core::autolabel::{
    likelihood_summary, triage_batch, ReviewStore, TriageConfig, AUTO_ANNOTATOR,
};
use pvscan_core::evaluation::{align, RejectPolicy};
use pvscan_core::model::GroundTruthLabel;
use pvscan_core::ndjson;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::emit;
use crate::cli::TriageArgs;
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord, Stage};

/// Thresholds in effect: the data directory's saved settings (written by the
/// review service) override the config file.
pub fn effective_config(data: &DataDir, config: &Config) -> anyhow::Result<TriageConfig> {
    let path = data.triage_config();
    if !path.exists() {
        return Ok(config.triage);
    }
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let saved: TriageConfig = serde_json::from_str(&text)
        .with_context(|| format!("invalid triage settings in {}", path.display()))?;
    saved.validate()?;
    Ok(saved)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriageSummary {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub config: TriageConfig,
    pub considered: usize,
    pub auto_accepted: usize,
    pub queued: usize,
    pub pending: usize,
    /// Likelihood analytics over human-labeled tiles, when both classes exist.
    pub distribution: Option<pvscan_core::autolabel::DistributionSummary>,
}

pub fn triage(data: &DataDir, config: Config, args: TriageArgs) -> anyhow::Result<()> {
    config.validate()?;
    let mut cfg = effective_config(data, &config)?;
    if let Some(t) = args.confidence_threshold {
        cfg.confidence_threshold = t;
    }
    if let Some(m) = args.likelihood_margin {
        cfg.likelihood_margin = m;
    }
    cfg.validate()?;

    let _lock = data.lock()?;
    let mut snapshot = config.snapshot();
    snapshot["triage"] = serde_json::to_value(cfg)?;
    let mut run = RunRecord::start(Stage::Triage, snapshot);

    let human: BTreeMap<String, GroundTruthLabel> = data
        .labels_latest()?
        .into_iter()
        .filter(|(_, l)| l.annotator != AUTO_ANNOTATOR)
        .collect();
    let mut records: Vec<_> = data
        .latest_predictions()?
        .into_values()
        .filter(|r| r.failure.is_none())
        .filter(|r| !args.unlabeled_only || !human.contains_key(&r.tile_id))
        .collect();
    records.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    let result = triage_batch(&records, &cfg);

    ndjson::write_all(&data.auto_labels(), &result.accepted)?;
    let store = ReviewStore::open(data.review_queue(), data.labels())?;
    let pending = store.merge_queue(result.queue.clone())?;

    let mut merged = 0;
    if args.merge_auto {
        // Auto labels never override a human label.
        let current = data.labels_latest()?;
        let fresh: Vec<GroundTruthLabel> = result
            .accepted
            .iter()
            .filter(|l| !human.contains_key(&l.tile_id))
            .filter(|l| {
                current.get(&l.tile_id).map(|c| c.label_projection()) != Some(l.label_projection())
            })
            .cloned()
            .collect();
        ndjson::append(&data.labels(), &fresh)?;
        merged = fresh.len();
    }

    let truths: Vec<GroundTruthLabel> = human.into_values().collect();
    let aligned = align(&records, &truths, RejectPolicy::Exclude);
    let distribution = likelihood_summary(&aligned.preds, &aligned.truths).ok();
    let summary = TriageSummary {
        run_id: run.run_id.to_string(),
        created_at: Utc::now(),
        config: cfg,
        considered: records.len(),
        auto_accepted: result.accepted.len(),
        queued: result.queue.len(),
        pending,
        distribution,
    };
    ndjson::write_atomic(
        &data.triage_summary(),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;

    run.count("considered", records.len())
        .count("auto_accepted", result.accepted.len())
        .count("queued", result.queue.len())
        .count("pending", pending)
        .count("merged_auto", merged);
    let run = run.finish(data)?;
    emit(
        &run,
        json!({
            "config": cfg,
            "median_likelihood_true": summary.distribution.as_ref().map(|d| d.median_likelihood_true),
            "median_likelihood_false": summary.distribution.as_ref().map(|d| d.median_likelihood_false),
        }),
    );
    Ok(())
}
