//! One-pass central moments, extrema and threshold exceedance.
//!
//! Updates use the incremental central-moment recurrences (Welford for the
//! second moment, Terriberry/Pébay for the third and fourth), and merges use
//! the pairwise combination formulas, so partial accumulators built on
//! different workers can be reduced without revisiting samples.

use serde::{Deserialize, Serialize};

use super::StatsError;

/// Running central moments and extrema for one scalar stream.
///
/// This is the threshold-free core shared by [`MomentsAccumulator`] and the
/// dense per-cell arrays in `field_stats`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for Moments {
    fn default() -> Self {
        Self::new()
    }
}

impl Moments {
    pub const fn new() -> Self {
        Moments {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            m3: 0.0,
            m4: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    /// Folds one finite observation into the accumulator. The caller is
    /// responsible for rejecting non-finite values.
    #[inline]
    pub fn push(&mut self, y: f64) {
        let n1 = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        let delta = y - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;

        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;

        if y < self.min {
            self.min = y;
        }
        if y > self.max {
            self.max = y;
        }
        self.mean = self.mean.clamp(self.min, self.max);
        // m2 and m4 are sums of even powers; cancellation can leave -0 or a
        // negative ulp
        self.m2 = self.m2.max(0.0);
        self.m4 = self.m4.max(0.0);
    }

    /// Combines two accumulators over disjoint samples.
    pub fn merge(&self, other: &Moments) -> Moments {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return *other;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;

        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;

        let min = self.min.min(other.min);
        let max = self.max.max(other.max);
        Moments {
            count: self.count + other.count,
            mean: mean.clamp(min, max),
            m2: m2.max(0.0),
            m3,
            m4: m4.max(0.0),
            min,
            max,
        }
    }

    fn require(&self, needed: u64) -> Result<(), StatsError> {
        if self.count < needed {
            Err(StatsError::InsufficientCount {
                count: self.count,
                required: needed,
            })
        } else {
            Ok(())
        }
    }

    pub fn mean(&self) -> Result<f64, StatsError> {
        self.require(1)?;
        Ok(self.mean)
    }

    /// Unbiased sample variance `m2 / (n - 1)`.
    pub fn variance(&self) -> Result<f64, StatsError> {
        self.require(2)?;
        Ok(self.m2 / (self.count - 1) as f64)
    }

    /// Sample skewness `g1 = sqrt(n) m3 / m2^(3/2)`.
    pub fn skewness(&self) -> Result<f64, StatsError> {
        self.require(2)?;
        if self.m2 == 0.0 {
            return Err(StatsError::ZeroVariance);
        }
        let n = self.count as f64;
        Ok(n.sqrt() * self.m3 / self.m2.powf(1.5))
    }

    /// Sample excess kurtosis `g2 = n m4 / m2^2 - 3`.
    pub fn kurtosis(&self) -> Result<f64, StatsError> {
        self.require(2)?;
        if self.m2 == 0.0 {
            return Err(StatsError::ZeroVariance);
        }
        let n = self.count as f64;
        Ok(n * self.m4 / (self.m2 * self.m2) - 3.0)
    }

    pub fn min(&self) -> Result<f64, StatsError> {
        self.require(1)?;
        Ok(self.min)
    }

    pub fn max(&self) -> Result<f64, StatsError> {
        self.require(1)?;
        Ok(self.max)
    }
}

/// Moments plus per-threshold exceedance counters (`y > threshold`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsAccumulator {
    moments: Moments,
    thresholds: Vec<f64>,
    exceed_counts: Vec<u64>,
}

impl MomentsAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        MomentsAccumulator {
            moments: Moments::new(),
            thresholds: thresholds.to_vec(),
            exceed_counts: vec![0; thresholds.len()],
        }
    }

    pub fn from_samples(thresholds: &[f64], samples: &[f64]) -> Result<Self, StatsError> {
        let mut acc = Self::new(thresholds);
        for &y in samples {
            acc.update(y)?;
        }
        Ok(acc)
    }

    pub fn update(&mut self, y: f64) -> Result<(), StatsError> {
        if !y.is_finite() {
            return Err(StatsError::NonFinite(y));
        }
        self.moments.push(y);
        for (count, &t) in self.exceed_counts.iter_mut().zip(&self.thresholds) {
            if y > t {
                *count += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &MomentsAccumulator) -> Result<MomentsAccumulator, StatsError> {
        if self.thresholds.len() != other.thresholds.len()
            || self
                .thresholds
                .iter()
                .zip(&other.thresholds)
                .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(StatsError::ThresholdMismatch);
        }
        Ok(MomentsAccumulator {
            moments: self.moments.merge(&other.moments),
            thresholds: self.thresholds.clone(),
            exceed_counts: self
                .exceed_counts
                .iter()
                .zip(&other.exceed_counts)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn moments(&self) -> &Moments {
        &self.moments
    }

    pub fn count(&self) -> u64 {
        self.moments.count
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn exceed_counts(&self) -> &[u64] {
        &self.exceed_counts
    }

    pub fn mean(&self) -> Result<f64, StatsError> {
        self.moments.mean()
    }

    pub fn variance(&self) -> Result<f64, StatsError> {
        self.moments.variance()
    }

    pub fn skewness(&self) -> Result<f64, StatsError> {
        self.moments.skewness()
    }

    pub fn kurtosis(&self) -> Result<f64, StatsError> {
        self.moments.kurtosis()
    }

    pub fn min(&self) -> Result<f64, StatsError> {
        self.moments.min()
    }

    pub fn max(&self) -> Result<f64, StatsError> {
        self.moments.max()
    }

    /// Fraction of observations strictly above `threshold`, which must be one
    /// of the configured thresholds.
    pub fn exceedance_probability(&self, threshold: f64) -> Result<f64, StatsError> {
        let idx = self
            .thresholds
            .iter()
            .position(|t| t.to_bits() == threshold.to_bits())
            .ok_or(StatsError::UnknownThreshold(threshold))?;
        self.moments.require(1)?;
        Ok(self.exceed_counts[idx] as f64 / self.moments.count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    /// Two-pass batch reference on stored samples.
    struct TwoPass {
        mean: f64,
        var: f64,
        skew: f64,
        kurt: f64,
    }

    fn two_pass(xs: &[f64]) -> TwoPass {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
        for &x in xs {
            let d = x - mean;
            s2 += d * d;
            s3 += d * d * d;
            s4 += d * d * d * d;
        }
        TwoPass {
            mean,
            var: s2 / (n - 1.0),
            skew: n.sqrt() * s3 / s2.powf(1.5),
            kurt: n * s4 / (s2 * s2) - 3.0,
        }
    }

    #[test]
    fn three_point_stream() {
        let acc = MomentsAccumulator::from_samples(&[], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(acc.count(), 3);
        assert_eq!(acc.mean().unwrap(), 2.0);
        assert_eq!(acc.variance().unwrap(), 1.0);
    }

    #[test]
    fn single_sample() {
        let acc = MomentsAccumulator::from_samples(&[], &[5.0]).unwrap();
        assert_eq!(acc.min().unwrap(), 5.0);
        assert_eq!(acc.max().unwrap(), 5.0);
        assert_eq!(acc.mean().unwrap(), 5.0);
        assert_eq!(acc.moments().m2, 0.0);
        assert!(matches!(
            acc.variance(),
            Err(StatsError::InsufficientCount { count: 1, required: 2 })
        ));
    }

    #[test]
    fn empty_queries_error() {
        let acc = MomentsAccumulator::new(&[0.5]);
        assert!(acc.mean().is_err());
        assert!(acc.min().is_err());
        assert!(acc.exceedance_probability(0.5).is_err());
    }

    #[test]
    fn non_finite_rejected_with_value() {
        let mut acc = MomentsAccumulator::new(&[]);
        match acc.update(f64::NAN) {
            Err(StatsError::NonFinite(v)) => assert!(v.is_nan()),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            acc.update(f64::INFINITY),
            Err(StatsError::NonFinite(v)) if v == f64::INFINITY
        ));
        assert_eq!(acc.count(), 0);
    }

    #[test]
    fn stream_matches_two_pass_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random();
                3.0 + (-u.ln()).powf(1.3)
            })
            .collect();
        let acc = MomentsAccumulator::from_samples(&[], &xs).unwrap();
        let oracle = two_pass(&xs);
        assert!(rel(acc.mean().unwrap(), oracle.mean) <= 1e-10);
        assert!(rel(acc.variance().unwrap(), oracle.var) <= 1e-10);
        assert!(rel(acc.skewness().unwrap(), oracle.skew) <= 1e-10);
        assert!(rel(acc.kurtosis().unwrap(), oracle.kurt) <= 1e-10);
    }

    #[test]
    fn merge_equals_sequential() {
        let a = MomentsAccumulator::from_samples(&[1.5], &[1.0, 2.0]).unwrap();
        let b = MomentsAccumulator::from_samples(&[1.5], &[3.0]).unwrap();
        let seq = MomentsAccumulator::from_samples(&[1.5], &[1.0, 2.0, 3.0]).unwrap();
        let m = a.merge(&b).unwrap();
        assert_eq!(m.count(), 3);
        assert!(rel(m.mean().unwrap(), seq.mean().unwrap()) <= 1e-12);
        assert!(rel(m.variance().unwrap(), seq.variance().unwrap()) <= 1e-12);
        assert!((m.moments().m3 - seq.moments().m3).abs() <= 1e-12);
        assert!(rel(m.moments().m4, seq.moments().m4) <= 1e-12);
        assert_eq!(m.exceed_counts(), seq.exceed_counts());
        assert_eq!(m.min().unwrap(), 1.0);
        assert_eq!(m.max().unwrap(), 3.0);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = MomentsAccumulator::from_samples(&[0.0], &[1.0, -4.0, 2.5]).unwrap();
        let e = MomentsAccumulator::new(&[0.0]);
        assert_eq!(a.merge(&e).unwrap(), a);
        assert_eq!(e.merge(&a).unwrap(), a);
    }

    #[test]
    fn merge_rejects_mismatched_thresholds() {
        let a = MomentsAccumulator::new(&[0.0]);
        let b = MomentsAccumulator::new(&[1.0]);
        assert!(matches!(a.merge(&b), Err(StatsError::ThresholdMismatch)));
        let c = MomentsAccumulator::new(&[]);
        assert!(matches!(a.merge(&c), Err(StatsError::ThresholdMismatch)));
    }

    #[test]
    fn merge_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blocks: Vec<MomentsAccumulator> = (0..3)
            .map(|k| {
                let xs: Vec<f64> = (0..100)
                    .map(|_| k as f64 + rng.random::<f64>() * 2.0)
                    .collect();
                MomentsAccumulator::from_samples(&[1.0], &xs).unwrap()
            })
            .collect();
        let left = blocks[0].merge(&blocks[1]).unwrap().merge(&blocks[2]).unwrap();
        let right = blocks[0].merge(&blocks[1].merge(&blocks[2]).unwrap()).unwrap();
        assert!(rel(left.mean().unwrap(), right.mean().unwrap()) <= 1e-10);
        assert!(rel(left.variance().unwrap(), right.variance().unwrap()) <= 1e-10);
        assert!(rel(left.skewness().unwrap(), right.skewness().unwrap()) <= 1e-10);
        assert!(rel(left.kurtosis().unwrap(), right.kurtosis().unwrap()) <= 1e-10);
    }

    #[test]
    fn exceedance_examples() {
        let acc = MomentsAccumulator::from_samples(&[2.5], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(acc.exceedance_probability(2.5).unwrap(), 0.5);
        let low = MomentsAccumulator::from_samples(&[10.0], &[1.0, 2.0]).unwrap();
        assert_eq!(low.exceedance_probability(10.0).unwrap(), 0.0);
        assert!(matches!(
            low.exceedance_probability(3.0),
            Err(StatsError::UnknownThreshold(_))
        ));
    }

    #[test]
    fn exceedance_of_uniform_draws() {
        // 10^4 Bernoulli(0.1) trials: sd = 0.003, so 0.01 is > 3 sd
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let acc = MomentsAccumulator::from_samples(&[0.9], &xs).unwrap();
        let p = acc.exceedance_probability(0.9).unwrap();
        assert!((p - 0.1).abs() <= 0.01, "{p}");
    }

    proptest! {
        #[test]
        fn invariants_hold(xs in prop::collection::vec(-1e6f64..1e6, 1..200)) {
            let acc = MomentsAccumulator::from_samples(&[0.0, 100.0], &xs).unwrap();
            let m = acc.moments();
            prop_assert!(m.m2 >= 0.0 && m.m4 >= 0.0);
            prop_assert!(m.min <= m.mean && m.mean <= m.max);
            for &c in acc.exceed_counts() {
                prop_assert!(c <= acc.count());
            }
        }

        #[test]
        fn permutation_invariance(
            xs in prop::collection::vec(-100.0f64..100.0, 3..120),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = xs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = MomentsAccumulator::from_samples(&[0.0], &xs).unwrap();
            let b = MomentsAccumulator::from_samples(&[0.0], &shuffled).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-6);
            prop_assert!(close(a.mean().unwrap(), b.mean().unwrap()));
            prop_assert!(close(a.variance().unwrap(), b.variance().unwrap()));
            if a.moments().m2 > 1e-6 {
                prop_assert!(close(a.skewness().unwrap(), b.skewness().unwrap()));
                prop_assert!(close(a.kurtosis().unwrap(), b.kurtosis().unwrap()));
            }
            prop_assert_eq!(a.min().unwrap(), b.min().unwrap());
            prop_assert_eq!(a.max().unwrap(), b.max().unwrap());
            prop_assert_eq!(a.exceed_counts(), b.exceed_counts());
        }
    }
}
