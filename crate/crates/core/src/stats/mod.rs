//! Single-stream statistics: moments, extrema, exceedance and quantiles.

mod moments;
mod quantile;

pub use moments::{Moments, MomentsAccumulator};
pub use quantile::{
    empirical_quantile, empirical_rank, gamma_linear, rm_step, QuantileEstimator,
    StatisticsConfig, StepSchedule,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("non-finite observation {0}")]
    NonFinite(f64),
    #[error("statistic needs at least {required} observations, have {count}")]
    InsufficientCount { count: u64, required: u64 },
    #[error("zero variance: standardized moment undefined")]
    ZeroVariance,
    #[error("threshold {0} is not configured")]
    UnknownThreshold(f64),
    #[error("accumulators carry different threshold lists")]
    ThresholdMismatch,
    #[error("empty sample")]
    EmptySample,
    #[error("invalid statistics configuration: {0}")]
    InvalidConfig(String),
}
