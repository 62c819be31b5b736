//! Routing predictions to auto-accepted labels or a human review queue, plus
//! the likelihood distribution analytics used to tune that routing.

mod kde;
mod review;

pub use kde::{
    gaussian_kde, likelihood_summary, median, silverman_bandwidth, DistributionSummary, KdeCurve,
    KDE_GRID_POINTS,
};
pub use review::{ReviewError, ReviewStore};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::InferenceRecord;
use crate::model::{GroundTruthLabel, PvAssessment};

pub const AUTO_ANNOTATOR: &str = "auto";
pub const DECISION_BOUNDARY: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum AutolabelError {
    #[error("invalid triage config: {0}")]
    InvalidConfig(String),
    #[error("no {0} samples")]
    EmptyClass(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriageConfig {
    pub confidence_threshold: f64,
    pub likelihood_margin: f64,
    pub decision_boundary: f64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.8,
            likelihood_margin: 0.1,
            decision_boundary: DECISION_BOUNDARY,
        }
    }
}

impl TriageConfig {
    pub fn new(confidence_threshold: f64, likelihood_margin: f64) -> Result<Self, AutolabelError> {
        let cfg = Self {
            confidence_threshold,
            likelihood_margin,
            decision_boundary: DECISION_BOUNDARY,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AutolabelError> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(AutolabelError::InvalidConfig(format!(
                "confidence_threshold {} is outside [0, 1]",
                self.confidence_threshold
            )));
        }
        if !(0.0..0.5).contains(&self.likelihood_margin) {
            return Err(AutolabelError::InvalidConfig(format!(
                "likelihood_margin {} is outside [0, 0.5)",
                self.likelihood_margin
            )));
        }
        if self.decision_boundary != DECISION_BOUNDARY {
            return Err(AutolabelError::InvalidConfig(
                "decision_boundary is fixed at 0.5".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageDecision {
    AutoAccept,
    Review,
}

/// Review when the model is unsure of itself or its likelihood sits near the
/// decision boundary; otherwise accept the predicted label, either class.
pub fn triage(a: &PvAssessment, cfg: &TriageConfig) -> TriageDecision {
    if a.confidence < cfg.confidence_threshold
        || (a.likelihood - cfg.decision_boundary).abs() < cfg.likelihood_margin
    {
        TriageDecision::Review
    } else {
        TriageDecision::AutoAccept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Corrected,
    Confirmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    /// Items are keyed by the tile they concern.
    pub tile_id: String,
    /// Absent when the model response could not be parsed.
    pub prediction: Option<PvAssessment>,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<GroundTruthLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    pub updated_at: DateTime<Utc>,
}

impl ReviewItem {
    /// Sort key for the queue; unparsed items come first.
    pub fn confidence(&self) -> f64 {
        self.prediction
            .as_ref()
            .map_or(f64::NEG_INFINITY, |p| p.confidence)
    }
}

/// Lowest confidence first, ties by tile id.
pub fn sort_queue(items: &mut [ReviewItem]) {
    items.sort_by(|a, b| {
        a.confidence()
            .total_cmp(&b.confidence())
            .then_with(|| a.tile_id.cmp(&b.tile_id))
    });
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriageResult {
    pub accepted: Vec<GroundTruthLabel>,
    pub queue: Vec<ReviewItem>,
}

pub fn auto_label(tile_id: &str, a: &PvAssessment, at: DateTime<Utc>) -> GroundTruthLabel {
    GroundTruthLabel {
        tile_id: tile_id.to_string(),
        present: a.present,
        location: a.location,
        quantity: a.quantity,
        annotator: AUTO_ANNOTATOR.to_string(),
        annotated_at: at,
    }
}

/// Splits records into auto labels and a review queue. Every record lands in
/// exactly one of the two; rejected parses always go to review.
pub fn triage_batch(records: &[InferenceRecord], cfg: &TriageConfig) -> TriageResult {
    let mut out = TriageResult::default();
    for r in records {
        let accepted = r
            .outcome
            .assessment
            .as_ref()
            .filter(|_| r.outcome.is_accepted());
        match accepted {
            Some(a) if triage(a, cfg) == TriageDecision::AutoAccept => {
                out.accepted.push(auto_label(&r.tile_id, a, r.created_at));
            }
            _ => out.queue.push(ReviewItem {
                tile_id: r.tile_id.clone(),
                prediction: accepted.cloned(),
                status: ReviewStatus::Pending,
                correction: None,
                reviewer: None,
                updated_at: r.created_at,
            }),
        }
    }
    sort_queue(&mut out.queue);
    out
}
