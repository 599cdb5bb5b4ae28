//! Scoring: answer-distribution diagnostics, horizon decay metrics, and
//! text-similarity measures.
//!
//! Everything here is pure computation over already-collected results; no
//! module in this tree talks to a model.

pub mod distribution;
pub mod horizon;
pub mod text;

pub use distribution::{
    distribution_diagnostics, flip_rate, tv_distance, Categorical, DistributionDiagnostics,
};
pub use horizon::{horizon_metrics, HorizonMetrics, HorizonSeries};
pub use text::{
    bleu, cider, cider_pair, mean_over_horizons, meteor, ngram_score, rouge_l, text_similarity,
    tokenize, CiderContext, CiderScores, NgramConfig, SimilarityScores,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("distributions have different arity ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("not a probability distribution: {reason}")]
    NotADistribution { reason: String },
    #[error("{what} must not be empty")]
    Empty { what: &'static str },
    #[error("{left} predictions but {right} references")]
    LengthMismatch { left: usize, right: usize },
    #[error("horizon series needs at least 2 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("horizon series must be strictly increasing in t")]
    UnorderedHorizons,
    #[error("series values must be finite and non-negative, got {value}")]
    BadValue { value: f64 },
    #[error("first measured horizon accuracy is zero; decay ratios are undefined")]
    ZeroBaseline,
    #[error("invalid n-gram config: {reason}")]
    BadNgramConfig { reason: String },
}
