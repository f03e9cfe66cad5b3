//! Robbins-Monro recursive quantile estimation and the order-statistic
//! reference estimator.

use serde::{Deserialize, Serialize};

use super::StatsError;

/// Exponent schedule for the Robbins-Monro step `C / n^gamma(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// Fixed exponent in (0, 1].
    Constant(f64),
    /// Exponent ramping linearly from 0.1 at the first observation to 1.0 at
    /// the declared sample size.
    Linear,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Linear
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<(), StatsError> {
        match *self {
            StepSchedule::Constant(g) if !(g > 0.0 && g <= 1.0) => {
                Err(StatsError::InvalidConfig(format!("constant gamma {g} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Exponent used when moving from the `n`-th to the `(n+1)`-th estimate.
    #[inline]
    pub fn exponent(&self, n: u64, declared_n: u64) -> f64 {
        match *self {
            StepSchedule::Constant(g) => g,
            StepSchedule::Linear => linear_exponent(n, declared_n),
        }
    }

    /// Step magnitude `gain / n^gamma(n)`.
    #[inline]
    pub fn step(&self, gain: f64, n: u64, declared_n: u64) -> f64 {
        gain / (n as f64).powf(self.exponent(n, declared_n))
    }
}

/// Linear exponent profile `0.1 + 0.9 (n - 1) / (N - 1)`, held at 1.0 once `n`
/// passes the declared sample size `N`.
pub fn gamma_linear(n: u64, declared_n: u64) -> Result<f64, StatsError> {
    if declared_n < 2 {
        return Err(StatsError::InvalidConfig(format!(
            "declared sample size {declared_n} must be at least 2"
        )));
    }
    if n == 0 {
        return Err(StatsError::InvalidConfig("observation index starts at 1".into()));
    }
    Ok(linear_exponent(n, declared_n))
}

#[inline]
fn linear_exponent(n: u64, declared_n: u64) -> f64 {
    let k = n.clamp(1, declared_n);
    // the ratio is formed first so that n == N gives exactly 1.0
    let frac = (k - 1) as f64 / (declared_n - 1) as f64;
    0.1 + 0.9 * frac
}

/// Applies one Robbins-Monro move to `q` given observation `y` and the
/// current step size. A tie `y == q` counts as `y <= q`.
#[inline]
pub fn rm_step(q: f64, y: f64, alpha: f64, step: f64) -> f64 {
    if y <= q {
        q - step * (1.0 - alpha)
    } else {
        q + step * alpha
    }
}

/// Robbins-Monro estimate of one quantile order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEstimator {
    alpha: f64,
    q: f64,
    n: u64,
    declared_n: u64,
    gain: f64,
    schedule: StepSchedule,
}

impl QuantileEstimator {
    /// Seeds the estimator with its first observation: `q(1) = y1`.
    pub fn init(alpha: f64, cfg: &StatisticsConfig, y1: f64) -> Result<Self, StatsError> {
        Self::with_params(alpha, cfg.gain, cfg.schedule, cfg.declared_n, y1)
    }

    pub fn with_params(
        alpha: f64,
        gain: f64,
        schedule: StepSchedule,
        declared_n: u64,
        y1: f64,
    ) -> Result<Self, StatsError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(StatsError::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(StatsError::InvalidConfig(format!("gain {gain} must be positive")));
        }
        if declared_n < 2 {
            return Err(StatsError::InvalidConfig(format!(
                "declared sample size {declared_n} must be at least 2"
            )));
        }
        schedule.validate()?;
        if !y1.is_finite() {
            return Err(StatsError::NonFinite(y1));
        }
        Ok(QuantileEstimator {
            alpha,
            q: y1,
            n: 1,
            declared_n,
            gain,
            schedule,
        })
    }

    pub fn update(&mut self, y: f64) -> Result<(), StatsError> {
        if !y.is_finite() {
            return Err(StatsError::NonFinite(y));
        }
        let step = self.current_step();
        self.q = rm_step(self.q, y, self.alpha, step);
        self.n += 1;
        Ok(())
    }

    /// Step size that the next update will use.
    pub fn current_step(&self) -> f64 {
        self.schedule.step(self.gain, self.n, self.declared_n)
    }

    pub fn estimate(&self) -> f64 {
        self.q
    }

    pub fn observations(&self) -> u64 {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn schedule(&self) -> StepSchedule {
        self.schedule
    }
}

/// Order-statistic estimator: element of rank `floor(alpha N) + 1` (1-based,
/// capped at `N`) of the sorted sample.
pub fn empirical_quantile(sample: &[f64], alpha: f64) -> Result<f64, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
    }
    if let Some(&bad) = sample.iter().find(|y| !y.is_finite()) {
        return Err(StatsError::NonFinite(bad));
    }
    let mut buf = sample.to_vec();
    let idx = empirical_rank(buf.len(), alpha) - 1;
    let (_, v, _) = buf.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(*v)
}

/// 1-based rank used by [`empirical_quantile`].
pub fn empirical_rank(n: usize, alpha: f64) -> usize {
    ((alpha * n as f64).floor() as usize + 1).min(n)
}

/// Run configuration shared by every estimator of a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticsConfig {
    pub quantile_orders: Vec<f64>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default)]
    pub schedule: StepSchedule,
    pub declared_n: u64,
}

fn default_gain() -> f64 {
    1.0
}

impl StatisticsConfig {
    pub fn new(quantile_orders: Vec<f64>, declared_n: u64) -> Self {
        StatisticsConfig {
            quantile_orders,
            thresholds: Vec::new(),
            gain: 1.0,
            schedule: StepSchedule::Linear,
            declared_n,
        }
    }

    /// The 99 percentiles 0.01, 0.02, ..., 0.99.
    pub fn percentiles() -> Vec<f64> {
        (1..100).map(|p| p as f64 / 100.0).collect()
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.declared_n < 2 {
            return Err(StatsError::InvalidConfig(format!(
                "declared sample size {} must be at least 2",
                self.declared_n
            )));
        }
        if let Some(a) = self.quantile_orders.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(StatsError::InvalidConfig(format!("quantile order {a} outside (0, 1)")));
        }
        if self.quantile_orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StatsError::InvalidConfig(
                "quantile orders must be strictly increasing".into(),
            ));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !t.is_finite()) {
            return Err(StatsError::InvalidConfig(format!("threshold {t} is not finite")));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(StatsError::InvalidConfig(format!("gain {} must be positive", self.gain)));
        }
        self.schedule.validate()
    }

    /// Index of `alpha` among the configured orders (matched to 1e-12).
    pub fn quantile_index(&self, alpha: f64) -> Option<usize> {
        self.quantile_orders.iter().position(|a| (a - alpha).abs() <= 1e-12)
    }

    pub fn threshold_index(&self, threshold: f64) -> Option<usize> {
        self.thresholds.iter().position(|t| t.to_bits() == threshold.to_bits())
    }
}
