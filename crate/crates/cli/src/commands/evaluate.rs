//! `evaluate`: metrics reports from the journal and the label manifest.

use std::collections::BTreeMap;

use anyhow::{bail, Context};
use pvscan_core::autolabel::{likelihood_summary, AUTO_ANNOTATOR};
use pvscan_core::evaluation::{
    align, build_report, render_reports, MetricsReport, RejectPolicy, ReportFormat,
};
use pvscan_core::model::GroundTruthLabel;
use pvscan_core::ndjson::write_atomic;
use serde_json::json;

use super::emit;
use crate::cli::EvaluateArgs;
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord, Stage};

pub const AGGREGATE_REGION: &str = "all";

pub fn evaluate(data: &DataDir, config: Config, args: EvaluateArgs) -> anyhow::Result<()> {
    let _lock = data.lock()?;
    let mut snapshot = config.snapshot();
    snapshot["evaluate"] =
        json!({"by_region": args.by_region, "reject_as_negative": args.reject_as_negative});
    let mut run = RunRecord::start(Stage::Evaluate, snapshot);
    let policy = if args.reject_as_negative {
        RejectPolicy::AsNegative
    } else {
        RejectPolicy::Exclude
    };

    // Auto labels come from the predictions themselves and are not ground
    // truth for scoring them.
    let truths: Vec<GroundTruthLabel> = data
        .labels_latest()?
        .into_values()
        .filter(|l| l.annotator != AUTO_ANNOTATOR)
        .collect();
    if truths.is_empty() {
        bail!("no ground-truth labels; run `pvscan labels import` or `pvscan synth` first");
    }
    let records: Vec<_> = data.latest_predictions()?.into_values().collect();
    let region_of: BTreeMap<String, String> = data
        .tile_records()?
        .into_iter()
        .map(|t| (t.tile_id, t.region_name))
        .collect();

    let aligned = align(&records, &truths, policy);
    let aggregate = build_report(AGGREGATE_REGION, &aligned).context("nothing to evaluate")?;
    let mut reports = vec![aggregate.clone()];
    if args.by_region {
        let mut groups: BTreeMap<&str, Vec<GroundTruthLabel>> = BTreeMap::new();
        for t in &truths {
            let region = region_of.get(&t.tile_id).map_or("unknown", String::as_str);
            groups.entry(region).or_default().push(t.clone());
        }
        for (region, group) in groups {
            match build_report(region, &align(&records, &group, policy)) {
                Ok(r) => reports.push(r),
                Err(e) => log::warn!("region {region}: {e}"),
            }
        }
    }
    let distribution = likelihood_summary(&aligned.preds, &aligned.truths).ok();

    let dir = data.reports_dir().join(run.run_id.to_string());
    std::fs::create_dir_all(&dir)?;
    write_atomic(
        &dir.join("report.csv"),
        render_reports(&reports, ReportFormat::Csv).as_bytes(),
    )?;
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&reports)?.as_bytes(),
    )?;
    if let Some(d) = &distribution {
        write_atomic(
            &dir.join("distribution.json"),
            serde_json::to_string_pretty(d)?.as_bytes(),
        )?;
    }
    write_atomic(
        &data.latest_report(),
        serde_json::to_string_pretty(&aggregate)?.as_bytes(),
    )?;

    run.count("evaluated", aggregate.evaluated)
        .count("excluded_rejected", aggregate.excluded_rejected)
        .count("missing_prediction", aggregate.missing_prediction)
        .count("regions", reports.len() - 1);
    let run = run.finish(data)?;
    emit(&run, summary_json(&aggregate, &dir, distribution.as_ref()));
    Ok(())
}

fn summary_json(
    r: &MetricsReport,
    dir: &std::path::Path,
    distribution: Option<&pvscan_core::autolabel::DistributionSummary>,
) -> serde_json::Value {
    json!({
        "reports": dir,
        "weighted_f1": r.weighted.f1,
        "solar_f1": r.solar.f1,
        "location_accuracy_solar": r.location_accuracy_solar,
        "quantity_accuracy_solar": r.quantity_accuracy_solar,
        "calibration_bce": r.calibration_bce,
        "median_likelihood_true": distribution.map(|d| d.median_likelihood_true),
        "median_likelihood_false": distribution.map(|d| d.median_likelihood_false),
    })
}
