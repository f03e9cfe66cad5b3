//! Calibration harness for the Robbins-Monro estimator: full trajectories,
//! repeated-run estimator distributions against closed-form quantiles, and
//! summary scores.
//!
//! Within one repetition every estimator consumes the same sample sequence,
//! drawn from a ChaCha stream selected by the repetition index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Triangular, Uniform};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::stats::{empirical_quantile, empirical_rank, QuantileEstimator, StepSchedule};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("no estimates to summarize")]
    Empty,
    #[error("invalid harness setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetDistribution {
    /// N(0, 1)
    Gaussian,
    /// U(0, 1)
    Uniform,
    /// Triangular on [0, 1] with mode 0.5
    Triangular,
    /// Exponential with rate 1
    Exponential,
}

impl TargetDistribution {
    pub const ALL: [TargetDistribution; 4] = [
        TargetDistribution::Gaussian,
        TargetDistribution::Uniform,
        TargetDistribution::Triangular,
        TargetDistribution::Exponential,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TargetDistribution::Gaussian => "gaussian",
            TargetDistribution::Uniform => "uniform",
            TargetDistribution::Triangular => "triangular",
            TargetDistribution::Exponential => "exponential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s.to_ascii_lowercase())
    }

    /// Closed-form inverse CDF.
    pub fn exact_quantile(&self, alpha: f64) -> f64 {
        match self {
            TargetDistribution::Gaussian => -std::f64::consts::SQRT_2 * erfc_inv(2.0 * alpha),
            TargetDistribution::Uniform => alpha,
            TargetDistribution::Triangular => {
                if alpha <= 0.5 {
                    (alpha / 2.0).sqrt()
                } else {
                    1.0 - ((1.0 - alpha) / 2.0).sqrt()
                }
            }
            TargetDistribution::Exponential => -(1.0 - alpha).ln(),
        }
    }

    pub fn density(&self, y: f64) -> f64 {
        match self {
            TargetDistribution::Gaussian => {
                (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
            TargetDistribution::Uniform => {
                if (0.0..=1.0).contains(&y) {
                    1.0
                } else {
                    0.0
                }
            }
            TargetDistribution::Triangular => {
                if (0.0..=0.5).contains(&y) {
                    4.0 * y
                } else if (0.5..=1.0).contains(&y) {
                    4.0 * (1.0 - y)
                } else {
                    0.0
                }
            }
            TargetDistribution::Exponential => {
                if y >= 0.0 {
                    (-y).exp()
                } else {
                    0.0
                }
            }
        }
    }

    /// Distance between the 0.9 and 0.1 quantiles.
    pub fn interdecile_range(&self) -> f64 {
        self.exact_quantile(0.9) - self.exact_quantile(0.1)
    }

    /// Asymptotic standard deviation of the order-statistic estimator,
    /// `sqrt(alpha (1 - alpha) / ((N + 2) f(q)^2))`.
    pub fn empirical_asymptotic_std(&self, alpha: f64, n: usize) -> f64 {
        let f = self.density(self.exact_quantile(alpha));
        (alpha * (1.0 - alpha) / ((n as f64 + 2.0) * f * f)).sqrt()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match self {
            TargetDistribution::Gaussian => {
                let d = Normal::new(0.0, 1.0).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            TargetDistribution::Uniform => {
                let d = Uniform::new(0.0, 1.0).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            TargetDistribution::Triangular => {
                let d = Triangular::new(0.0, 1.0, 0.5).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            TargetDistribution::Exponential => {
                let d = Exp::new(1.0).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EstimatorSpec {
    Empirical,
    RobbinsMonro { schedule: StepSchedule, gain: f64 },
}

impl EstimatorSpec {
    pub fn rm(schedule: StepSchedule) -> Self {
        EstimatorSpec::RobbinsMonro { schedule, gain: 1.0 }
    }

    /// The five estimators compared in the calibration study.
    pub fn study_set() -> Vec<EstimatorSpec> {
        vec![
            EstimatorSpec::Empirical,
            EstimatorSpec::rm(StepSchedule::Constant(0.5)),
            EstimatorSpec::rm(StepSchedule::Constant(0.7)),
            EstimatorSpec::rm(StepSchedule::Constant(0.9)),
            EstimatorSpec::rm(StepSchedule::Linear),
        ]
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Empirical => "empirical".into(),
            EstimatorSpec::RobbinsMonro { schedule: StepSchedule::Linear, .. } => "rm-linear".into(),
            EstimatorSpec::RobbinsMonro { schedule: StepSchedule::Constant(g), .. } => {
                format!("rm-gamma-{g}")
            }
        }
    }

    /// Final estimate after consuming `sample` in order.
    pub fn estimate(&self, sample: &[f64], alpha: f64) -> f64 {
        match *self {
            EstimatorSpec::Empirical => empirical_quantile(sample, alpha).expect("non-empty finite sample"),
            EstimatorSpec::RobbinsMonro { .. } => *self.trajectory(sample, alpha).last().unwrap(),
        }
    }

    /// Estimate after each observation. For the empirical estimator this is
    /// recomputed on every prefix, which is quadratic; intended for plots.
    pub fn trajectory(&self, sample: &[f64], alpha: f64) -> Vec<f64> {
        match *self {
            EstimatorSpec::Empirical => (1..=sample.len())
                .map(|k| empirical_quantile(&sample[..k], alpha).unwrap())
                .collect(),
            EstimatorSpec::RobbinsMonro { schedule, gain } => {
                let declared = (sample.len() as u64).max(2);
                let mut est =
                    QuantileEstimator::with_params(alpha, gain, schedule, declared, sample[0])
                        .expect("valid estimator parameters");
                let mut path = Vec::with_capacity(sample.len());
                path.push(est.estimate());
                for &y in &sample[1..] {
                    est.update(y).expect("finite sample");
                    path.push(est.estimate());
                }
                path
            }
        }
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n_traj` independent estimate paths of length `capital_n`.
pub fn run_trajectories(
    dist: TargetDistribution,
    spec: EstimatorSpec,
    n_traj: usize,
    capital_n: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ValidationError> {
    check_setup(capital_n, alpha)?;
    Ok((0..n_traj)
        .map(|k| {
            let sample = dist.sample(&mut stream(seed, k as u64), capital_n);
            spec.trajectory(&sample, alpha)
        })
        .collect())
}

fn check_setup(capital_n: usize, alpha: f64) -> Result<(), ValidationError> {
    if capital_n < 2 {
        return Err(ValidationError::Setup(format!("N = {capital_n} must be at least 2")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ValidationError::Setup(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRun {
    pub spec: EstimatorSpec,
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStudy {
    pub distribution: TargetDistribution,
    pub alpha: f64,
    pub capital_n: usize,
    pub exact: f64,
    pub runs: Vec<EstimatorRun>,
}

impl DistributionStudy {
    pub fn run_for(&self, spec: &EstimatorSpec) -> Option<&EstimatorRun> {
        self.runs.iter().find(|r| &r.spec == spec)
    }
}

/// Repeats every estimator `n_repeat` times on paired samples of size
/// `capital_n` and records the final estimates.
pub fn run_distribution_study(
    dist: TargetDistribution,
    alpha: f64,
    capital_n: usize,
    n_repeat: usize,
    seed: u64,
    estimators: &[EstimatorSpec],
) -> Result<DistributionStudy, ValidationError> {
    check_setup(capital_n, alpha)?;
    let mut runs: Vec<EstimatorRun> = estimators
        .iter()
        .map(|&spec| EstimatorRun {
            spec,
            estimates: Vec::with_capacity(n_repeat),
        })
        .collect();
    for rep in 0..n_repeat {
        let sample = dist.sample(&mut stream(seed, rep as u64), capital_n);
        for run in &mut runs {
            run.estimates.push(run.spec.estimate(&sample, alpha));
        }
    }
    Ok(DistributionStudy {
        distribution: dist,
        alpha,
        capital_n,
        exact: dist.exact_quantile(alpha),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub bias: f64,
    /// Sample standard deviation (n - 1 denominator; 0 for a single value).
    pub std: f64,
    pub rmse: f64,
    /// Empirical 2.5% and 97.5% points of the estimates.
    pub band: (f64, f64),
}

pub fn summarize(estimates: &[f64], exact: f64) -> Result<Summary, ValidationError> {
    if estimates.is_empty() {
        return Err(ValidationError::Empty);
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let ss: f64 = estimates.iter().map(|e| (e - mean).powi(2)).sum();
    let std = if estimates.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    let rmse = (estimates.iter().map(|e| (e - exact).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = estimates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pick = |p: f64| sorted[((p * (n - 1.0)).round() as usize).min(sorted.len() - 1)];
    Ok(Summary {
        mean,
        bias: mean - exact,
        std,
        rmse,
        band: (pick(0.025), pick(0.975)),
    })
}

/// Outcome of the per-distribution calibration test for one estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bias_ok: bool,
    pub rmse_ratio: f64,
    pub rmse_ok: bool,
}

/// Maximum tolerated RMSE of a streaming estimator, as a multiple of the
/// empirical estimator's RMSE on the same samples.
pub const RMSE_RATIO_LIMIT: f64 = 2.0;

/// Checks an estimator against the empirical one in `study`:
/// `|mean - exact| <= 3 std_emp / sqrt(R) + 0.05 IDR` and
/// `rmse <= 2 rmse_emp`.
pub fn calibrate(study: &DistributionStudy, spec: &EstimatorSpec) -> Option<Calibration> {
    let emp = summarize(&study.run_for(&EstimatorSpec::Empirical)?.estimates, study.exact).ok()?;
    let run = study.run_for(spec)?;
    let s = summarize(&run.estimates, study.exact).ok()?;
    let r = run.estimates.len() as f64;
    let bias_bound = 3.0 * emp.std / r.sqrt() + 0.05 * study.distribution.interdecile_range();
    let ratio = s.rmse / emp.rmse;
    Some(Calibration {
        bias_ok: s.bias.abs() <= bias_bound,
        rmse_ratio: ratio,
        rmse_ok: ratio <= RMSE_RATIO_LIMIT,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessVerdict {
    /// Labels of estimators meeting the RMSE bound on every distribution.
    pub robust: Vec<String>,
    /// Labels of constant-exponent estimators failing somewhere.
    pub fragile_constant: Vec<String>,
    /// True when the linear profile is robust and no constant exponent is.
    pub linear_uniquely_robust: bool,
    /// On some distribution gamma = 0.5 has the lowest RMSE among the
    /// constant exponents, and on another it does not.
    pub ordering_reverses: bool,
    /// The linear profile never has the worst RMSE among RM estimators.
    pub linear_never_worst: bool,
}

/// Aggregates studies over several distributions into the robustness
/// comparison between constant and linear exponent schedules.
pub fn robustness_verdict(studies: &[DistributionStudy]) -> RobustnessVerdict {
    let specs: Vec<EstimatorSpec> = studies
        .first()
        .map(|s| s.runs.iter().map(|r| r.spec).collect())
        .unwrap_or_default();
    let rm_specs: Vec<EstimatorSpec> =
        specs.iter().copied().filter(|s| *s != EstimatorSpec::Empirical).collect();
    let mut robust = Vec::new();
    let mut fragile_constant = Vec::new();
    for spec in &rm_specs {
        let ok = studies
            .iter()
            .all(|st| calibrate(st, spec).is_some_and(|c| c.rmse_ok));
        let constant = matches!(
            spec,
            EstimatorSpec::RobbinsMonro { schedule: StepSchedule::Constant(_), .. }
        );
        if ok {
            robust.push(spec.label());
        } else if constant {
            fragile_constant.push(spec.label());
        }
    }
    let linear = EstimatorSpec::rm(StepSchedule::Linear);
    let constants: Vec<&EstimatorSpec> = rm_specs
        .iter()
        .filter(|s| matches!(s, EstimatorSpec::RobbinsMonro { schedule: StepSchedule::Constant(_), .. }))
        .collect();
    let linear_uniquely_robust = robust.contains(&linear.label())
        && !constants.iter().any(|c| robust.contains(&c.label()));

    let rmse = |st: &DistributionStudy, spec: &EstimatorSpec| {
        st.run_for(spec)
            .and_then(|r| summarize(&r.estimates, st.exact).ok())
            .map(|s| s.rmse)
            .unwrap_or(f64::INFINITY)
    };
    let half = EstimatorSpec::rm(StepSchedule::Constant(0.5));
    let half_best: Vec<bool> = studies
        .iter()
        .map(|st| {
            let h = rmse(st, &half);
            constants.iter().all(|c| rmse(st, c) >= h)
        })
        .collect();
    let ordering_reverses = half_best.iter().any(|&b| b) && half_best.iter().any(|&b| !b);
    let linear_never_worst = studies.iter().all(|st| {
        let l = rmse(st, &linear);
        rm_specs.iter().any(|s| *s != linear && rmse(st, s) > l)
    });
    RobustnessVerdict {
        robust,
        fragile_constant,
        linear_uniquely_robust,
        ordering_reverses,
        linear_never_worst,
    }
}

/// Exact bootstrap resampling weights for the order statistic of 1-based
/// rank `rank` in a sample of size `n`: entry `j` is the probability that the
/// resampled order statistic equals the `(j+1)`-th smallest original value,
/// `P(Bin(n, (j+1)/n) >= rank) - P(Bin(n, j/n) >= rank)`.
pub fn bootstrap_weights(n: usize, rank: usize) -> Vec<f64> {
    assert!(n >= 1 && (1..=n).contains(&rank));
    let tail = |p: f64| -> f64 {
        // P(Bin(n, p) >= rank) by summing pmf terms in log space
        if p <= 0.0 {
            return 0.0;
        }
        if p >= 1.0 {
            return 1.0;
        }
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        let mut log_choose = 0.0;
        let mut total = 0.0;
        for k in 0..=n {
            if k > 0 {
                log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
            }
            if k >= rank {
                total += (log_choose + k as f64 * lp + (n - k) as f64 * lq).exp();
            }
        }
        total.min(1.0)
    };
    let cdf: Vec<f64> = (0..=n).map(|j| tail(j as f64 / n as f64)).collect();
    cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
}

/// Bootstrap standard error of an order statistic given the sorted sample
/// and weights from [`bootstrap_weights`].
pub fn bootstrap_std_error(sorted: &[f64], weights: &[f64]) -> f64 {
    let (mut m1, mut m2) = (0.0, 0.0);
    for (&y, &w) in sorted.iter().zip(weights) {
        m1 += w * y;
        m2 += w * y * y;
    }
    (m2 - m1 * m1).max(0.0).sqrt()
}

/// Allowed ratio of median |estimate - empirical| to median bootstrap SE.
pub const ORACLE_SE_FACTOR: f64 = 1.5;

/// Median deviation from the empirical quantile against the median
/// bootstrap standard error, over a set of positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    /// `None` for the row pooling every order.
    pub alpha: Option<f64>,
    pub positions: usize,
    pub median_deviation: f64,
    pub median_std_error: f64,
    /// Positions whose bootstrap SE is exactly zero (ties in the sample).
    pub zero_se_fraction: f64,
}

impl OracleRow {
    pub fn passes(&self) -> bool {
        self.median_deviation <= ORACLE_SE_FACTOR * self.median_std_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub per_alpha: Vec<OracleRow>,
    pub pooled: OracleRow,
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

fn oracle_row(alpha: Option<f64>, mut devs: Vec<f64>, mut ses: Vec<f64>) -> OracleRow {
    let zero = ses.iter().filter(|&&s| s == 0.0).count();
    OracleRow {
        alpha,
        positions: devs.len(),
        zero_se_fraction: zero as f64 / ses.len() as f64,
        median_deviation: median(&mut devs),
        median_std_error: median(&mut ses),
    }
}

/// Streaming form of [`compare_to_oracle`] for position sets too large to
/// hold at once: feed blocks of positions, then [`finish`](Self::finish).
#[derive(Debug, Clone)]
pub struct OracleAccumulator {
    n: usize,
    alphas: Vec<f64>,
    ranks: Vec<usize>,
    weights: Vec<Vec<f64>>,
    devs: Vec<Vec<f64>>,
    ses: Vec<Vec<f64>>,
}

impl OracleAccumulator {
    /// `n` ensemble members per position, one entry of `alphas` per order.
    pub fn new(n: usize, alphas: &[f64]) -> Result<Self, ValidationError> {
        if alphas.is_empty() {
            return Err(ValidationError::Empty);
        }
        for &a in alphas {
            check_setup(n, a)?;
        }
        let ranks: Vec<usize> = alphas.iter().map(|&a| empirical_rank(n, a)).collect();
        Ok(OracleAccumulator {
            n,
            alphas: alphas.to_vec(),
            weights: ranks.iter().map(|&k| bootstrap_weights(n, k)).collect(),
            ranks,
            devs: vec![Vec::new(); alphas.len()],
            ses: vec![Vec::new(); alphas.len()],
        })
    }

    /// `columns[p]` holds every member's value at position `p`;
    /// `estimates[i][p]` is the estimate of order `alphas[i]` there.
    pub fn add(&mut self, columns: &[Vec<f64>], estimates: &[&[f64]]) -> Result<(), ValidationError> {
        if columns.iter().any(|c| c.len() != self.n)
            || estimates.len() != self.alphas.len()
            || estimates.iter().any(|e| e.len() != columns.len())
        {
            return Err(ValidationError::Setup("oracle columns and estimates disagree in shape".into()));
        }
        let mut sorted = Vec::with_capacity(self.n);
        for (p, c) in columns.iter().enumerate() {
            sorted.clear();
            sorted.extend_from_slice(c);
            sorted.sort_by(f64::total_cmp);
            for i in 0..self.alphas.len() {
                self.devs[i].push((estimates[i][p] - sorted[self.ranks[i] - 1]).abs());
                self.ses[i].push(bootstrap_std_error(&sorted, &self.weights[i]));
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<OracleReport, ValidationError> {
        if self.devs[0].is_empty() {
            return Err(ValidationError::Empty);
        }
        let all_dev = self.devs.concat();
        let all_se = self.ses.concat();
        let per_alpha = self
            .alphas
            .iter()
            .zip(self.devs.into_iter().zip(self.ses))
            .map(|(&a, (d, s))| oracle_row(Some(a), d, s))
            .collect();
        Ok(OracleReport { per_alpha, pooled: oracle_row(None, all_dev, all_se) })
    }
}

/// Compares streamed quantile estimates with the order-statistic oracle.
/// `columns[p]` holds every ensemble member's value at position `p`;
/// `estimates` pairs each order with one estimate per position.
pub fn compare_to_oracle(
    columns: &[Vec<f64>],
    estimates: &[(f64, Vec<f64>)],
) -> Result<OracleReport, ValidationError> {
    let n = columns.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(ValidationError::Empty);
    }
    let alphas: Vec<f64> = estimates.iter().map(|(a, _)| *a).collect();
    let mut acc = OracleAccumulator::new(n, &alphas)?;
    let est: Vec<&[f64]> = estimates.iter().map(|(_, e)| e.as_slice()).collect();
    acc.add(columns, &est)?;
    acc.finish()
}
