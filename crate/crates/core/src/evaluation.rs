//! Detection metrics over prediction / ground-truth pairs and the tabular
//! report built from them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::InferenceRecord;
use crate::model::{GroundTruthLabel, LocationLabel, PvAssessment, QuantityBucket};

/// JSON Schema for [`MetricsReport`] documents.
pub const REPORT_SCHEMA: &str = include_str!("../assets/report.schema.json");

pub const BCE_EPSILON: f64 = 1e-12;

pub const CSV_HEADER: [&str; 6] = ["region", "class", "precision", "recall", "f1", "accuracy"];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("pair {index}: prediction for {pred} is aligned with truth for {truth}")]
    Alignment {
        index: usize,
        pred: String,
        truth: String,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no pairs to evaluate")]
    EmptyEvaluation,
    #[error("subset has no pairs")]
    EmptySubset,
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tile_id: String,
    pub assessment: PvAssessment,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the negative class treated as positive.
    pub fn flipped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

fn check_aligned(preds: &[Prediction], truths: &[GroundTruthLabel]) -> Result<(), EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    for (index, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.tile_id != t.tile_id {
            return Err(EvalError::Alignment {
                index,
                pred: p.tile_id.clone(),
                truth: t.tile_id.clone(),
            });
        }
    }
    Ok(())
}

/// Presence confusion matrix with "Solar" as the positive class.
pub fn confusion(
    preds: &[Prediction],
    truths: &[GroundTruthLabel],
) -> Result<ConfusionCounts, EvalError> {
    check_aligned(preds, truths)?;
    let mut c = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        match (p.assessment.present, t.present) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall on this class's subset.
    pub accuracy: f64,
    pub support: u64,
    /// Some denominator was zero and the affected metric was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Metrics for the positive class of `c`. Use [`ConfusionCounts::flipped`]
/// for the negative class.
pub fn class_metrics(c: &ConfusionCounts) -> ClassMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let degenerate = precision.is_none() || recall.is_none();
    let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    ClassMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: recall,
        support: c.tp + c.fn_,
        degenerate,
    }
}

/// Support-weighted mean of the two classes' metrics.
pub fn weighted_average(
    solar: &ClassMetrics,
    no_solar: &ClassMetrics,
) -> Result<ClassMetrics, EvalError> {
    let total = solar.support + no_solar.support;
    if total == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let (ws, wn) = (solar.support as f64, no_solar.support as f64);
    let mix = |a: f64, b: f64| {
        if a == b {
            a
        } else {
            (ws * a + wn * b) / (ws + wn)
        }
    };
    Ok(ClassMetrics {
        precision: mix(solar.precision, no_solar.precision),
        recall: mix(solar.recall, no_solar.recall),
        f1: mix(solar.f1, no_solar.f1),
        accuracy: mix(solar.accuracy, no_solar.accuracy),
        support: total,
        degenerate: (solar.support > 0 && solar.degenerate)
            || (no_solar.support > 0 && no_solar.degenerate),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Location,
    Quantity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    SolarOnly,
    All,
}

/// Fraction of pairs whose `field` values are the same label. Near misses
/// ("left" for "top-left") count as wrong.
pub fn exact_match_accuracy(
    field: Field,
    preds: &[Prediction],
    truths: &[GroundTruthLabel],
    subset: Subset,
) -> Result<f64, EvalError> {
    check_aligned(preds, truths)?;
    let mut considered = 0u64;
    let mut hits = 0u64;
    for (p, t) in preds.iter().zip(truths) {
        if subset == Subset::SolarOnly && !t.present {
            continue;
        }
        considered += 1;
        let same = match field {
            Field::Location => p.assessment.location == t.location,
            Field::Quantity => p.assessment.quantity == t.quantity,
        };
        hits += same as u64;
    }
    ratio(hits, considered).ok_or(EvalError::EmptySubset)
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1-ε]`.
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            if y {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / probs.len() as f64)
}

/// How rejected parses enter the evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectPolicy {
    /// Left out of the metrics and counted separately.
    #[default]
    Exclude,
    /// Scored as a "no solar" prediction.
    AsNegative,
}

/// Aligned pairs ready for the metric functions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aligned {
    pub preds: Vec<Prediction>,
    pub truths: Vec<GroundTruthLabel>,
    /// Likelihood/label pairs from parsed responses only; substituted
    /// negatives carry no likelihood.
    pub calibration: Vec<(f64, bool)>,
    pub excluded_rejected: usize,
    /// Labeled tiles with no journal record.
    pub missing_prediction: usize,
}

/// Pairs every labeled tile with its most recent journal record.
pub fn align(
    records: &[InferenceRecord],
    truths: &[GroundTruthLabel],
    policy: RejectPolicy,
) -> Aligned {
    let latest: HashMap<&str, &InferenceRecord> =
        records.iter().map(|r| (r.tile_id.as_str(), r)).collect();
    let mut out = Aligned::default();
    for t in truths {
        let Some(record) = latest.get(t.tile_id.as_str()) else {
            out.missing_prediction += 1;
            continue;
        };
        let assessment = match (&record.outcome.assessment, policy) {
            (Some(a), _) if record.outcome.is_accepted() => {
                out.calibration.push((a.likelihood, t.present));
                *a
            }
            (_, RejectPolicy::AsNegative) => PvAssessment {
                present: false,
                location: LocationLabel::NotApplicable,
                quantity: QuantityBucket::NotApplicable,
                likelihood: 0.0,
                confidence: 0.0,
            },
            (_, RejectPolicy::Exclude) => {
                out.excluded_rejected += 1;
                continue;
            }
        };
        out.preds.push(Prediction {
            tile_id: t.tile_id.clone(),
            assessment,
        });
        out.truths.push(t.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub region: String,
    pub confusion: ConfusionCounts,
    pub solar: ClassMetrics,
    pub no_solar: ClassMetrics,
    pub weighted: ClassMetrics,
    /// `None` when the subset is empty.
    pub location_accuracy_solar: Option<f64>,
    pub location_accuracy_all: Option<f64>,
    pub quantity_accuracy_solar: Option<f64>,
    pub quantity_accuracy_all: Option<f64>,
    pub calibration_bce: Option<f64>,
    pub evaluated: usize,
    pub excluded_rejected: usize,
    pub missing_prediction: usize,
}

pub fn build_report(region: &str, aligned: &Aligned) -> Result<MetricsReport, EvalError> {
    let (preds, truths) = (&aligned.preds, &aligned.truths);
    if preds.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let c = confusion(preds, truths)?;
    let solar = class_metrics(&c);
    let no_solar = class_metrics(&c.flipped());
    let weighted = weighted_average(&solar, &no_solar)?;
    let acc = |field, subset| exact_match_accuracy(field, preds, truths, subset).ok();
    let (probs, labels): (Vec<f64>, Vec<bool>) = aligned.calibration.iter().copied().unzip();
    Ok(MetricsReport {
        region: region.to_string(),
        confusion: c,
        solar,
        no_solar,
        weighted,
        location_accuracy_solar: acc(Field::Location, Subset::SolarOnly),
        location_accuracy_all: acc(Field::Location, Subset::All),
        quantity_accuracy_solar: acc(Field::Quantity, Subset::SolarOnly),
        quantity_accuracy_all: acc(Field::Quantity, Subset::All),
        calibration_bce: bce_loss(&probs, &labels).ok(),
        evaluated: preds.len(),
        excluded_rejected: aligned.excluded_rejected,
        missing_prediction: aligned.missing_prediction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    render_reports(std::slice::from_ref(report), format)
}

/// Several reports in one document: CSV rows are concatenated, JSON is an
/// array unless there is exactly one report.
pub fn render_reports(reports: &[MetricsReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let value = if reports.len() == 1 {
                serde_json::to_value(&reports[0])
            } else {
                serde_json::to_value(reports)
            };
            let mut s = serde_json::to_string_pretty(&value.expect("report serializes"))
                .expect("value prints");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory write");
            for r in reports {
                for (name, m) in [
                    ("Solar", &r.solar),
                    ("No Solar", &r.no_solar),
                    ("Weighted Average", &r.weighted),
                ] {
                    w.write_record([
                        r.region.as_str(),
                        name,
                        &pct(m.precision),
                        &pct(m.recall),
                        &pct(m.f1),
                        &pct(m.accuracy),
                    ])
                    .expect("in-memory write");
                }
            }
            String::from_utf8(w.into_inner().expect("in-memory flush"))
                .expect("csv output is utf-8")
        }
    }
}

/// One parsed CSV report row; metric values are percentages.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportRow {
    pub region: String,
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| EvalError::Csv(e.to_string()))?;
    if headers.iter().ne(CSV_HEADER) {
        return Err(EvalError::Csv(format!("unexpected header {headers:?}")));
    }
    rdr.deserialize()
        .collect::<Result<Vec<ReportRow>, _>>()
        .map_err(|e| EvalError::Csv(e.to_string()))
}
