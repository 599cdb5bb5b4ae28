//! Accuracy-decay metrics over future horizons.
//!
//! A [`HorizonSeries`] holds accuracy measured at strictly increasing
//! horizons (seconds past the last visible frame). Gaps are never
//! interpolated: every metric is defined over the measured points only.

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Accuracy per measured horizon. Values are unit-agnostic (fractions or
/// percentage points) as long as one series sticks to one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSeries {
    points: Vec<(u32, f64)>,
}

impl HorizonSeries {
    pub fn new(points: Vec<(u32, f64)>) -> Result<Self, MetricsError> {
        if points.is_empty() {
            return Err(MetricsError::Empty {
                what: "horizon series",
            });
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(MetricsError::UnorderedHorizons);
            }
        }
        if let Some(&(_, v)) = points.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(MetricsError::BadValue { value: v });
        }
        Ok(HorizonSeries { points })
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    /// Value at the earliest measured horizon.
    pub fn baseline(&self) -> f64 {
        self.points[0].1
    }

    pub fn value_at(&self, t: u32) -> Option<f64> {
        self.points
            .iter()
            .find(|(h, _)| *h == t)
            .map(|(_, v)| *v)
    }
}

/// Decay summary of one horizon series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// Signed change from the first to the last measured horizon.
    pub delta_acc: f64,
    /// Mean accuracy over all measured horizons.
    pub mean_acc: f64,
    /// Normalized decay rate: the sum of consecutive drops divided by the
    /// first measured value. Telescopes to `(first - last) / first`, so a
    /// constant series scores 0 and full decay to zero scores 1.
    pub ndr: f64,
    /// Mean relative accuracy ratio: the mean of `value / first` over every
    /// horizon after the first. 1 for a constant series.
    pub mrar: f64,
}

/// Computes [`HorizonMetrics`] over at least two measured points. Fails when
/// the first measured value is zero, which leaves the ratios undefined.
pub fn horizon_metrics(series: &HorizonSeries) -> Result<HorizonMetrics, MetricsError> {
    let pts = series.points();
    if pts.len() < 2 {
        return Err(MetricsError::TooFewPoints { got: pts.len() });
    }
    let eta0 = series.baseline();
    if eta0 == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    let first = pts[0].1;
    let last = pts[pts.len() - 1].1;
    let mean_acc = pts.iter().map(|(_, v)| v).sum::<f64>() / pts.len() as f64;
    let ndr = pts
        .windows(2)
        .map(|w| w[0].1 - w[1].1)
        .sum::<f64>()
        / eta0;
    let mrar = pts[1..].iter().map(|(_, v)| v / eta0).sum::<f64>() / (pts.len() - 1) as f64;
    Ok(HorizonMetrics {
        delta_acc: last - first,
        mean_acc,
        ndr,
        mrar,
    })
}
