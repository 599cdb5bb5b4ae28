//! Diagnostics over aligned answer distributions.
//!
//! All distributions here live on original option indices: displayed-slot
//! answers are mapped back through the trial's permutation before they are
//! counted, so two estimates taken under different shuffles are directly
//! comparable.

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::corpus::Permutation;
use crate::protocols::DistributionEstimate;

/// A categorical distribution: non-negative entries summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self, MetricsError> {
        if probs.is_empty() {
            return Err(MetricsError::Empty {
                what: "probability vector",
            });
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(MetricsError::NotADistribution {
                reason: format!("entry {bad} is negative or non-finite"),
            });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MetricsError::NotADistribution {
                reason: format!("entries sum to {total}, not 1"),
            });
        }
        Ok(Categorical { probs })
    }

    /// Normalizes raw counts; fails when every count is zero.
    pub fn from_counts(counts: &[u64]) -> Result<Self, MetricsError> {
        if counts.is_empty() {
            return Err(MetricsError::Empty {
                what: "count vector",
            });
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(MetricsError::NotADistribution {
                reason: "all counts are zero".into(),
            });
        }
        Ok(Categorical {
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = MetricsError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Categorical::new(v)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(c: Categorical) -> Vec<f64> {
        c.probs
    }
}

/// Total variation distance `0.5 * sum |p_i - q_i|`, in [0, 1].
pub fn tv_distance(p: &Categorical, q: &Categorical) -> Result<f64, MetricsError> {
    if p.k() != q.k() {
        return Err(MetricsError::DimensionMismatch {
            left: p.k(),
            right: q.k(),
        });
    }
    let sum: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * sum)
}

/// Mode and concentration summary of one answer distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionDiagnostics {
    /// Index of the largest mass; ties break to the smallest index.
    pub argmax: usize,
    /// Shannon entropy in nats (0 ln 0 := 0); at most ln K, attained by the
    /// uniform distribution.
    pub entropy: f64,
    /// Self-agreement `sum p_i^2`: the probability two independent draws
    /// coincide. 1 for a point mass, 1/K for uniform.
    pub self_agreement: f64,
}

/// Computes [`DistributionDiagnostics`] for a distribution.
pub fn distribution_diagnostics(p: &Categorical) -> DistributionDiagnostics {
    let mut argmax = 0;
    for (i, v) in p.probs.iter().enumerate() {
        if *v > p.probs[argmax] {
            argmax = i;
        }
    }
    let entropy = -p
        .probs
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>();
    let self_agreement = p.probs.iter().map(|v| v * v).sum();
    DistributionDiagnostics {
        argmax,
        entropy,
        self_agreement,
    }
}

fn argmax_counts(counts: &[u64]) -> usize {
    let mut argmax = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[argmax] {
            argmax = i;
        }
    }
    argmax
}

/// Fraction of shuffles whose aligned modal answer differs from the
/// unshuffled modal answer.
///
/// `base` is the estimate under the identity permutation; `per_sigma` holds
/// one aligned estimate per probed permutation. All estimates must already
/// live on original option indices and share the base's arity. A model that
/// answers by option content scores 0; a model that answers by position
/// scores (K! - (K-1)!) / K! under exhaustive probing.
pub fn flip_rate(
    base: &DistributionEstimate,
    per_sigma: &[(Permutation, DistributionEstimate)],
) -> Result<f64, MetricsError> {
    if per_sigma.is_empty() {
        return Err(MetricsError::Empty {
            what: "per-permutation estimates",
        });
    }
    for (_, est) in per_sigma {
        if est.counts.len() != base.counts.len() {
            return Err(MetricsError::DimensionMismatch {
                left: base.counts.len(),
                right: est.counts.len(),
            });
        }
    }
    let base_mode = argmax_counts(&base.counts);
    let flips = per_sigma
        .iter()
        .filter(|(_, est)| argmax_counts(&est.counts) != base_mode)
        .count();
    Ok(flips as f64 / per_sigma.len() as f64)
}
