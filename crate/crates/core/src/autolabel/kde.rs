use serde::{Deserialize, Serialize};

use super::AutolabelError;
use crate::evaluation::Prediction;
use crate::model::GroundTruthLabel;

pub const KDE_GRID_POINTS: usize = 201;

/// Used when the sample has no spread (one value, or all equal).
const FALLBACK_BANDWIDTH: f64 = 0.05;
/// Keeps the kernel wider than the grid spacing so the trapezoid rule holds.
const MIN_BANDWIDTH: f64 = 2.0 / (KDE_GRID_POINTS - 1) as f64;
/// Reflected copies on each side of [0, 1]; bandwidths here stay far below 1.
const REFLECTIONS: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub samples: usize,
    /// `(x, density)` on an even grid over [0, 1].
    pub grid: Vec<(f64, f64)>,
}

impl KdeCurve {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }

    pub fn argmax(&self) -> f64 {
        self.grid
            .iter()
            .copied()
            .fold((0.0, f64::NEG_INFINITY), |best, p| {
                if p.1 > best.1 {
                    p
                } else {
                    best
                }
            })
            .0
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule of thumb, `0.9 · min(σ, IQR/1.34) · n^(-1/5)`, falling back
/// to whichever spread measure is non-zero, then to a fixed width.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return FALLBACK_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return FALLBACK_BANDWIDTH,
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Gaussian KDE on [0, 1] with boundary reflection, so all mass stays inside
/// the unit interval. Samples are clamped into [0, 1] first.
pub fn gaussian_kde(samples: &[f64]) -> Option<KdeCurve> {
    if samples.is_empty() {
        return None;
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    let h = silverman_bandwidth(&xs).max(MIN_BANDWIDTH);
    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let kernel = |d: f64| (-0.5 * (d / h).powi(2)).exp();
    let grid = (0..KDE_GRID_POINTS)
        .map(|i| {
            let x = i as f64 / (KDE_GRID_POINTS - 1) as f64;
            let mut sum = 0.0;
            for &s in &xs {
                for k in -REFLECTIONS..=REFLECTIONS {
                    let shift = 2.0 * k as f64;
                    sum += kernel(x - (shift + s)) + kernel(x - (shift - s));
                }
            }
            (x, sum * norm)
        })
        .collect();
    Some(KdeCurve {
        bandwidth: h,
        samples: xs.len(),
        grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    /// Median likelihood over tiles whose ground truth is "Solar".
    pub median_likelihood_true: f64,
    pub median_likelihood_false: f64,
    pub true_count: usize,
    pub false_count: usize,
    /// Confidence density of true positives; `None` when there are none.
    pub true_positive_confidence: Option<KdeCurve>,
    /// Confidence density of false negatives.
    pub false_negative_confidence: Option<KdeCurve>,
}

/// Pairs must be aligned (see [`crate::evaluation::align`]).
pub fn likelihood_summary(
    preds: &[Prediction],
    truths: &[GroundTruthLabel],
) -> Result<DistributionSummary, AutolabelError> {
    let mut true_l = Vec::new();
    let mut false_l = Vec::new();
    let mut tp_conf = Vec::new();
    let mut fn_conf = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        let a = &p.assessment;
        if t.present {
            true_l.push(a.likelihood);
            if a.present {
                tp_conf.push(a.confidence);
            } else {
                fn_conf.push(a.confidence);
            }
        } else {
            false_l.push(a.likelihood);
        }
    }
    Ok(DistributionSummary {
        median_likelihood_true: median(&true_l).ok_or(AutolabelError::EmptyClass("solar"))?,
        median_likelihood_false: median(&false_l).ok_or(AutolabelError::EmptyClass("no-solar"))?,
        true_count: true_l.len(),
        false_count: false_l.len(),
        true_positive_confidence: gaussian_kde(&tp_conf),
        false_negative_confidence: gaussian_kde(&fn_conf),
    })
}
