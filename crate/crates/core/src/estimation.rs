//! Potential-outcomes populations, difference-in-means estimation and the
//! dependency estimators for availability series.
//!
//! Units are laid out bucket by bucket: unit `i` lives in bucket
//! `i / bucket_size`. Outcomes are indexed by a zero-based time index.

use itertools::Itertools;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::bits::BitVector;
use crate::bucketing::BucketId;
use crate::probability::binomial;

/// Largest number of (sample, assignment) pairs the enumeration oracles visit.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

/// Default tolerance for "mean cor* = 0" in [`delta_hat`].
pub const DEFAULT_DELTA_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimationError {
    #[error("time index {0} is not modeled by the population")]
    UnknownTime(usize),
    #[error("invalid population: {0}")]
    InvalidPopulation(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("assignment treats {treated} of {sample} units; an equal split is required")]
    UnequalSplit { treated: usize, sample: usize },
    #[error("each arm needs at least two units with nonzero variance")]
    ZeroVariance,
    #[error("enumeration would visit {work} draws, above the limit {ENUMERATION_LIMIT}")]
    TooLarge { work: String },
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("series needs at least two days")]
    EmptySeries,
    #[error("every lag has only NA correlation terms")]
    AllNA,
    #[error("no lag up to {max_lag} reaches the tolerance")]
    NotFound { max_lag: usize },
}

pub type Result<T> = std::result::Result<T, EstimationError>;

/// Finite population with potential outcomes `y0[t][i]` and `y1[t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Population<V = f64> {
    num_buckets: u32,
    bucket_size: usize,
    y0: Vec<Vec<V>>,
    y1: Vec<Vec<V>>,
}

impl<V: Copy> Population<V> {
    pub fn new(num_buckets: u32, bucket_size: usize, y0: Vec<Vec<V>>, y1: Vec<Vec<V>>) -> Result<Self> {
        let bad = |m: String| Err(EstimationError::InvalidPopulation(m));
        if num_buckets == 0 || bucket_size == 0 {
            return bad("need at least one bucket of at least one unit".into());
        }
        if y0.is_empty() || y0.len() != y1.len() {
            return bad(format!(
                "outcome periods differ or are empty: y0 has {}, y1 has {}",
                y0.len(),
                y1.len()
            ));
        }
        let n = num_buckets as usize * bucket_size;
        if let Some(row) = y0.iter().chain(&y1).find(|row| row.len() != n) {
            return bad(format!("outcome row has {} units, expected {n}", row.len()));
        }
        Ok(Self {
            num_buckets,
            bucket_size,
            y0,
            y1,
        })
    }

    /// Population observed at a single time index 0.
    pub fn single_period(num_buckets: u32, bucket_size: usize, y0: Vec<V>, y1: Vec<V>) -> Result<Self> {
        Self::new(num_buckets, bucket_size, vec![y0], vec![y1])
    }

    pub fn num_buckets(&self) -> u32 {
        self.num_buckets
    }

    pub fn bucket_size(&self) -> usize {
        self.bucket_size
    }

    pub fn num_units(&self) -> usize {
        self.num_buckets as usize * self.bucket_size
    }

    pub fn num_periods(&self) -> usize {
        self.y0.len()
    }

    pub fn bucket_of(&self, unit: usize) -> BucketId {
        BucketId((unit / self.bucket_size) as u32)
    }

    pub fn bucket_units(&self, bucket: BucketId) -> std::ops::Range<usize> {
        let start = bucket.index() * self.bucket_size;
        start..start + self.bucket_size
    }

    fn period(&self, t: usize) -> Result<(&[V], &[V])> {
        match (self.y0.get(t), self.y1.get(t)) {
            (Some(y0), Some(y1)) => Ok((y0, y1)),
            _ => Err(EstimationError::UnknownTime(t)),
        }
    }

    pub fn y0(&self, t: usize) -> Result<&[V]> {
        self.period(t).map(|p| p.0)
    }

    pub fn y1(&self, t: usize) -> Result<&[V]> {
        self.period(t).map(|p| p.1)
    }
}

impl Population<i64> {
    pub fn to_f64(&self) -> Population<f64> {
        let conv = |rows: &Vec<Vec<i64>>| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect()
        };
        Population {
            num_buckets: self.num_buckets,
            bucket_size: self.bucket_size,
            y0: conv(&self.y0),
            y1: conv(&self.y1),
        }
    }
}

/// A sample of units with an equal treatment/control split.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    buckets: Vec<BucketId>,
    units: Vec<usize>,
    treated: Vec<bool>,
}

impl SampleDraw {
    /// Sample made of every unit in `buckets` (kept in increasing bucket
    /// order); `treated[j]` is the arm of the j-th unit.
    pub fn from_buckets<V: Copy>(
        pop: &Population<V>,
        buckets: Vec<BucketId>,
        treated: Vec<bool>,
    ) -> Result<Self> {
        let mut buckets = buckets;
        buckets.sort_unstable();
        if buckets.windows(2).any(|w| w[0] == w[1]) {
            return Err(EstimationError::InvalidSample("duplicate bucket".into()));
        }
        if let Some(b) = buckets.iter().find(|b| b.0 >= pop.num_buckets) {
            return Err(EstimationError::InvalidSample(format!("bucket {} out of range", b.0)));
        }
        let units = buckets.iter().flat_map(|&b| pop.bucket_units(b)).collect();
        Self::build(buckets, units, treated)
    }

    /// Sample of individually drawn units.
    pub fn from_units<V: Copy>(pop: &Population<V>, units: Vec<usize>, treated: Vec<bool>) -> Result<Self> {
        if let Some(u) = units.iter().find(|&&u| u >= pop.num_units()) {
            return Err(EstimationError::InvalidSample(format!("unit {u} out of range")));
        }
        if units.iter().duplicates().next().is_some() {
            return Err(EstimationError::InvalidSample("duplicate unit".into()));
        }
        Self::build(Vec::new(), units, treated)
    }

    fn build(buckets: Vec<BucketId>, units: Vec<usize>, treated: Vec<bool>) -> Result<Self> {
        if treated.len() != units.len() {
            return Err(EstimationError::InvalidSample(format!(
                "{} assignments for {} units",
                treated.len(),
                units.len()
            )));
        }
        let n_treated = treated.iter().filter(|&&w| w).count();
        if units.is_empty() || 2 * n_treated != units.len() {
            return Err(EstimationError::UnequalSplit {
                treated: n_treated,
                sample: units.len(),
            });
        }
        Ok(Self {
            buckets,
            units,
            treated,
        })
    }

    /// Buckets drawn uniformly without replacement, then a uniformly random
    /// equal split of their units.
    pub fn random_buckets<V: Copy, R: Rng + ?Sized>(
        pop: &Population<V>,
        sample_buckets: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if sample_buckets > pop.num_buckets as usize {
            return Err(EstimationError::InvalidSample(format!(
                "cannot draw {sample_buckets} of {} buckets",
                pop.num_buckets
            )));
        }
        let buckets = rand::seq::index::sample(rng, pop.num_buckets as usize, sample_buckets)
            .into_iter()
            .map(|b| BucketId(b as u32))
            .collect();
        let n = sample_buckets * pop.bucket_size;
        Self::from_buckets(pop, buckets, random_split(n, rng))
    }

    /// Units drawn uniformly without replacement, then a random equal split.
    pub fn random_units<V: Copy, R: Rng + ?Sized>(
        pop: &Population<V>,
        sample_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if sample_size > pop.num_units() {
            return Err(EstimationError::InvalidSample(format!(
                "cannot draw {sample_size} of {} units",
                pop.num_units()
            )));
        }
        let mut units = rand::seq::index::sample(rng, pop.num_units(), sample_size).into_vec();
        units.sort_unstable();
        Self::from_units(pop, units, random_split(sample_size, rng))
    }

    /// Same units with a fresh uniformly random equal split.
    pub fn reassigned<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        Self {
            buckets: self.buckets.clone(),
            units: self.units.clone(),
            treated: random_split(self.units.len(), rng),
        }
    }

    pub fn buckets(&self) -> &[BucketId] {
        &self.buckets
    }

    pub fn units(&self) -> &[usize] {
        &self.units
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    fn arm(&self, arm: bool) -> impl Iterator<Item = usize> + '_ {
        self.units
            .iter()
            .zip(&self.treated)
            .filter(move |(_, &w)| w == arm)
            .map(|(&u, _)| u)
    }
}

/// Uniformly random equal split of `n` units. Odd `n` leaves one more
/// control than treated unit, which [`SampleDraw`] then rejects.
fn random_split<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<bool> {
    let mut w: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    w.shuffle(rng);
    w
}

/// Population average treatment effect at time `t`.
pub fn ate_true(pop: &Population, t: usize) -> Result<f64> {
    let (y0, y1) = pop.period(t)?;
    let diff: f64 = y1.iter().zip(y0).map(|(a, b)| a - b).sum();
    Ok(diff / pop.num_units() as f64)
}

/// Average treatment effect over the units of a subset of buckets.
pub fn ate_subset(pop: &Population, buckets: &[BucketId], t: usize) -> Result<f64> {
    let (y0, y1) = pop.period(t)?;
    let (sum, n) = buckets
        .iter()
        .flat_map(|&b| pop.bucket_units(b))
        .fold((0.0, 0usize), |(s, n), i| (s + y1[i] - y0[i], n + 1));
    if n == 0 {
        return Err(EstimationError::InvalidSample("empty bucket subset".into()));
    }
    Ok(sum / n as f64)
}

/// Change of the subset ATE between `t - lag` and `t`, computed from the
/// per-unit changes of the individual effects.
pub fn ate_tilde(pop: &Population, buckets: &[BucketId], t: usize, lag: usize) -> Result<f64> {
    let earlier = t.checked_sub(lag).ok_or(EstimationError::UnknownTime(t))?;
    let (p0, p1) = pop.period(earlier)?;
    let (c0, c1) = pop.period(t)?;
    let (sum, n) = buckets
        .iter()
        .flat_map(|&b| pop.bucket_units(b))
        .fold((0.0, 0usize), |(s, n), i| {
            (s + ((c1[i] - c0[i]) - (p1[i] - p0[i])), n + 1)
        });
    if n == 0 {
        return Err(EstimationError::InvalidSample("empty bucket subset".into()));
    }
    Ok(sum / n as f64)
}

/// Difference in means: treated mean of `y1` minus control mean of `y0`.
pub fn diff_in_means(draw: &SampleDraw, pop: &Population, t: usize) -> Result<f64> {
    let (y0, y1) = pop.period(t)?;
    let treated: f64 = draw.arm(true).map(|i| y1[i]).sum();
    let control: f64 = draw.arm(false).map(|i| y0[i]).sum();
    Ok(2.0 / draw.len() as f64 * (treated - control))
}

/// Horvitz-Thompson estimate of the population mean of arm `arm`'s
/// potential outcome. Every unit has inclusion probability `N_S / (2N)` in
/// each arm, so the estimate equals the arm's sample mean.
pub fn ht_mean(draw: &SampleDraw, pop: &Population, t: usize, arm: bool) -> Result<f64> {
    let (y0, y1) = pop.period(t)?;
    let y = if arm { y1 } else { y0 };
    let n = pop.num_units() as f64;
    let pi = draw.len() as f64 / (2.0 * n);
    Ok(draw.arm(arm).map(|i| y[i] / pi).sum::<f64>() / n)
}

/// Welch t-statistic of treated `y1` against control `y0`.
pub fn welch_t(draw: &SampleDraw, pop: &Population, t: usize) -> Result<f64> {
    let (y0, y1) = pop.period(t)?;
    let treated: Vec<f64> = draw.arm(true).map(|i| y1[i]).collect();
    let control: Vec<f64> = draw.arm(false).map(|i| y0[i]).collect();
    welch_t_from_samples(&treated, &control)
}

pub fn welch_t_from_samples(treated: &[f64], control: &[f64]) -> Result<f64> {
    let (m1, v1) = mean_and_variance(treated).ok_or(EstimationError::ZeroVariance)?;
    let (m0, v0) = mean_and_variance(control).ok_or(EstimationError::ZeroVariance)?;
    if v1 == 0.0 || v0 == 0.0 {
        return Err(EstimationError::ZeroVariance);
    }
    Ok((m1 - m0) / (v1 / treated.len() as f64 + v0 / control.len() as f64).sqrt())
}

/// Mean and unbiased variance, or `None` for fewer than two values.
pub fn mean_and_variance(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Some((mean, ss / (n - 1.0)))
}

/// Exact population ATE at `t`.
pub fn ate_exact(pop: &Population<i64>, t: usize) -> Result<BigRational> {
    let (y0, y1) = pop.period(t)?;
    let diff: i128 = y1.iter().zip(y0).map(|(&a, &b)| i128::from(a) - i128::from(b)).sum();
    Ok(BigRational::new(BigInt::from(diff), BigInt::from(pop.num_units())))
}

/// Work and validation shared by the two enumeration oracles.
fn sample_work(pop: &Population<i64>, sample_buckets: usize) -> Result<num_bigint::BigUint> {
    let n_s = sample_buckets * pop.bucket_size;
    if sample_buckets == 0 || !n_s.is_multiple_of(2) {
        return Err(EstimationError::UnequalSplit {
            treated: n_s / 2,
            sample: n_s,
        });
    }
    Ok(binomial(n_s as u64, (n_s / 2) as u64))
}

fn check_limit(work: num_bigint::BigUint) -> Result<()> {
    if work > num_bigint::BigUint::from(ENUMERATION_LIMIT) {
        return Err(EstimationError::TooLarge {
            work: work.to_string(),
        });
    }
    Ok(())
}

/// Sum over every `k`-subset of `pool` and every equal split of its units of
/// `sum_T y1 - sum_C y0`, together with the number of (sample, split) pairs.
fn enumerate_pool(pop: &Population<i64>, pool: &[u32], k: usize, t: usize) -> Result<(i128, u64)> {
    let (y0, y1) = pop.period(t)?;
    let mut total = 0i128;
    let mut count = 0u64;
    for buckets in pool.iter().combinations(k) {
        let units: Vec<usize> = buckets
            .iter()
            .flat_map(|&&b| pop.bucket_units(BucketId(b)))
            .collect();
        let sum_y0: i128 = units.iter().map(|&i| i128::from(y0[i])).sum();
        for treated in units.iter().combinations(units.len() / 2) {
            let t1: i128 = treated.iter().map(|&&i| i128::from(y1[i])).sum();
            let t0: i128 = treated.iter().map(|&&i| i128::from(y0[i])).sum();
            total += t1 - (sum_y0 - t0);
            count += 1;
        }
    }
    Ok((total, count))
}

fn mean_estimate(total: i128, count: u64, n_s: usize) -> BigRational {
    BigRational::new(BigInt::from(total) * 2, BigInt::from(count) * BigInt::from(n_s))
}

/// Exact mean of the difference-in-means estimator over every sample of
/// `sample_buckets` buckets and every equal split, paired with the exact ATE.
pub fn enumerate_unbiasedness(
    pop: &Population<i64>,
    sample_buckets: usize,
    t: usize,
) -> Result<(BigRational, BigRational)> {
    enumerate_restricted_unbiasedness(pop, pop.num_buckets as usize, sample_buckets, t)
}

/// As [`enumerate_unbiasedness`], but the samples are drawn within a bucket
/// subset that is itself enumerated over every subset of `subset_size`
/// buckets.
pub fn enumerate_restricted_unbiasedness(
    pop: &Population<i64>,
    subset_size: usize,
    sample_buckets: usize,
    t: usize,
) -> Result<(BigRational, BigRational)> {
    let b = pop.num_buckets as usize;
    if subset_size > b || sample_buckets > subset_size {
        return Err(EstimationError::InvalidSample(format!(
            "need sample ({sample_buckets}) <= subset ({subset_size}) <= buckets ({b})"
        )));
    }
    let work = sample_work(pop, sample_buckets)?
        * binomial(b as u64, subset_size as u64)
        * binomial(subset_size as u64, sample_buckets as u64);
    check_limit(work)?;
    let ate = ate_exact(pop, t)?;
    let mut total = 0i128;
    let mut count = 0u64;
    for subset in (0..b as u32).combinations(subset_size) {
        let (s, c) = enumerate_pool(pop, &subset, sample_buckets, t)?;
        total += s;
        count += c;
    }
    Ok((mean_estimate(total, count, sample_buckets * pop.bucket_size), ate))
}

/// Pearson correlation of two 0/1 vectors extended by case rules: 0 when
/// either vector is all ones, 1 when both are all zeros, `None` (NA) when one
/// of them is otherwise constant.
pub fn cor_star(b1: &BitVector, b2: &BitVector) -> Result<Option<f64>> {
    if b1.len() != b2.len() {
        return Err(EstimationError::LengthMismatch {
            left: b1.len(),
            right: b2.len(),
        });
    }
    let n = b1.len() as f64;
    let s1 = b1.count_ones() as f64;
    let s2 = b2.count_ones() as f64;
    if (s1 == n || s2 == n) && n > 0.0 {
        return Ok(Some(0.0));
    }
    if s1 == 0.0 && s2 == 0.0 {
        return Ok(Some(1.0));
    }
    if s1 == 0.0 || s2 == 0.0 {
        return Ok(None);
    }
    let s12 = b1.count_ones_and(b2) as f64;
    let cov = n * s12 - s1 * s2;
    let r = cov / ((s1 * (n - s1)).sqrt() * (s2 * (n - s2)).sqrt());
    Ok(Some(r.clamp(-1.0, 1.0)))
}

/// Mean cor* between a reference vector and each later vector, `None` where
/// the term is NA.
pub fn cor_star_against(reference: &BitVector, series: &[BitVector]) -> Result<Vec<Option<f64>>> {
    series.iter().map(|v| cor_star(reference, v)).collect()
}

/// How the lag `d` of the dependency estimator maps to a pair of days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaIndexing {
    /// `d` pairs `B_t` with `B_{t+d}`, for `d` in `1..T`.
    #[default]
    Lag,
    /// `d` counts days inclusively and pairs `B_t` with `B_{t+d-1}`, for `d`
    /// in `1..=T`; `d = 1` compares each day with itself. This matches the
    /// summation range `t = 1..T-d+1` and the day-1 metrics `cor*(B_1, B_d)`.
    Inclusive,
}

impl DeltaIndexing {
    fn offset(self, d: usize) -> usize {
        match self {
            Self::Lag => d,
            Self::Inclusive => d - 1,
        }
    }
}

/// Dependency profile of an availability series.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEstimate {
    /// Smallest qualifying `d`, if any.
    pub delta_hat: Option<usize>,
    /// Largest `d` examined.
    pub max_lag: usize,
    /// Entry `d - 1` is the mean cor* at `d`, `None` if every term is NA.
    pub mean_cor_by_lag: Vec<Option<f64>>,
}

/// Mean of the non-NA terms `cor*(B_t, B_{t+offset})` over all valid `t`.
fn mean_cor_at_offset(series: &[BitVector], offset: usize) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut terms = 0usize;
    for t in 0..series.len() - offset {
        if let Some(c) = cor_star(&series[t], &series[t + offset])? {
            sum += c;
            terms += 1;
        }
    }
    Ok((terms > 0).then(|| sum / terms as f64))
}

/// Entry `d - 1` holds `(1/T*) sum_t cor*(B_t, B_{t+d})` over the non-NA
/// terms, for `d` in `1..T`.
pub fn mean_cor_by_lag(series: &[BitVector]) -> Result<Vec<Option<f64>>> {
    mean_cor_profile(series, DeltaIndexing::Lag)
}

pub fn mean_cor_profile(series: &[BitVector], indexing: DeltaIndexing) -> Result<Vec<Option<f64>>> {
    let days = series.len();
    if days < 2 {
        return Err(EstimationError::EmptySeries);
    }
    let max_d = match indexing {
        DeltaIndexing::Lag => days - 1,
        DeltaIndexing::Inclusive => days,
    };
    (1..=max_d)
        .map(|d| mean_cor_at_offset(series, indexing.offset(d)))
        .collect()
}

pub fn estimate_delta(series: &[BitVector], tolerance: f64) -> Result<DeltaEstimate> {
    estimate_delta_with(series, tolerance, DeltaIndexing::Lag)
}

pub fn estimate_delta_with(series: &[BitVector], tolerance: f64, indexing: DeltaIndexing) -> Result<DeltaEstimate> {
    let profile = mean_cor_profile(series, indexing)?;
    if profile.iter().all(Option::is_none) {
        return Err(EstimationError::AllNA);
    }
    let delta_hat = profile
        .iter()
        .position(|m| matches!(m, Some(c) if c.abs() <= tolerance))
        .map(|i| i + 1);
    Ok(DeltaEstimate {
        delta_hat,
        max_lag: profile.len(),
        mean_cor_by_lag: profile,
    })
}

/// Smallest lag whose mean cor* is within `tolerance` of zero.
pub fn delta_hat(series: &[BitVector], tolerance: f64) -> Result<usize> {
    delta_hat_with(series, tolerance, DeltaIndexing::Lag)
}

pub fn delta_hat_with(series: &[BitVector], tolerance: f64, indexing: DeltaIndexing) -> Result<usize> {
    let est = estimate_delta_with(series, tolerance, indexing)?;
    est.delta_hat.ok_or(EstimationError::NotFound {
        max_lag: est.max_lag,
    })
}

/// Convert an exact rational to the nearest `f64`, for reporting.
pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// True when the exact mean and ATE agree.
pub fn exact_equal(pair: &(BigRational, BigRational)) -> bool {
    (&pair.0 - &pair.1).is_zero()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use statrs::statistics::Statistics;

    fn pop_f(b: u32, nb: usize, y0: Vec<f64>, y1: Vec<f64>) -> Population {
        Population::single_period(b, nb, y0, y1).unwrap()
    }

    fn random_pop(seed: u64, b: u32, nb: usize) -> Population {
        let mut rng = rng_for(seed, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = b as usize * nb;
        let y0: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let y1: Vec<f64> = y0.iter().map(|v| v + 0.5 + normal.sample(&mut rng)).collect();
        pop_f(b, nb, y0, y1)
    }

    fn int_pop(b: u32, nb: usize, y0: Vec<i64>, y1: Vec<i64>) -> Population<i64> {
        Population::single_period(b, nb, y0, y1).unwrap()
    }

    fn bits(s: &str) -> BitVector {
        BitVector::from_bools(s.chars().map(|c| c == '1'))
    }

    #[test]
    fn population_validation() {
        assert!(Population::<f64>::single_period(2, 2, vec![0.0; 3], vec![0.0; 4]).is_err());
        assert!(Population::<f64>::single_period(0, 2, vec![], vec![]).is_err());
        assert!(Population::<f64>::new(1, 1, vec![vec![0.0]], vec![]).is_err());
        let p = pop_f(2, 2, vec![0.0; 4], vec![0.0; 4]);
        assert_eq!(p.bucket_of(3), BucketId(1));
        assert_eq!(p.bucket_units(BucketId(1)), 2..4);
        assert_eq!(ate_true(&p, 1), Err(EstimationError::UnknownTime(1)));
    }

    #[test]
    fn ate_examples() {
        let y0 = vec![1.0, 5.0, -2.0, 0.5];
        assert_eq!(ate_true(&pop_f(2, 2, y0.clone(), y0.clone()), 0).unwrap(), 0.0);
        let y1: Vec<f64> = y0.iter().map(|v| v + 3.0).collect();
        assert_eq!(ate_true(&pop_f(2, 2, y0, y1), 0).unwrap(), 3.0);
        let p = pop_f(4, 1, vec![0.0; 4], vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(ate_true(&p, 0).unwrap(), 3.0);
    }

    #[test]
    fn diff_in_means_constant_outcomes() {
        let p = pop_f(3, 2, vec![1.5; 6], vec![4.0; 6]);
        let mut rng = rng_for(1, &[]);
        let draw = SampleDraw::random_buckets(&p, 2, &mut rng).unwrap();
        assert_eq!(diff_in_means(&draw, &p, 0).unwrap(), 2.5);
    }

    #[test]
    fn unequal_split_is_rejected() {
        let p = pop_f(2, 2, vec![0.0; 4], vec![0.0; 4]);
        assert_eq!(
            SampleDraw::from_buckets(&p, vec![BucketId(0)], vec![true, true]),
            Err(EstimationError::UnequalSplit { treated: 2, sample: 2 })
        );
        assert!(SampleDraw::from_buckets(&p, vec![BucketId(0), BucketId(0)], vec![true; 4]).is_err());
        assert!(SampleDraw::from_units(&p, vec![0, 0], vec![true, false]).is_err());
    }

    #[test]
    fn mirror_property() {
        let p = random_pop(2, 3, 2);
        let p = pop_f(3, 2, p.y0(0).unwrap().to_vec(), p.y0(0).unwrap().to_vec());
        let buckets = vec![BucketId(0), BucketId(2)];
        let mut sum = 0.0;
        let mut count = 0;
        for treated in (0..4).combinations(2) {
            let w = (0..4).map(|i| treated.contains(&i)).collect();
            let draw = SampleDraw::from_buckets(&p, buckets.clone(), w).unwrap();
            sum += diff_in_means(&draw, &p, 0).unwrap();
            count += 1;
        }
        assert!((sum / f64::from(count)).abs() < 1e-12);
    }

    #[test]
    fn ht_mean_examples() {
        let p = pop_f(4, 2, vec![0.0; 8], vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        let draw = SampleDraw::from_buckets(
            &p,
            vec![BucketId(0), BucketId(1), BucketId(2), BucketId(3)],
            vec![true, true, true, true, false, false, false, false],
        )
        .unwrap();
        assert!((ht_mean(&draw, &p, 0, true).unwrap() - 2.5).abs() < 1e-12);

        let p = pop_f(2, 1, vec![7.0, 0.0], vec![3.0, -1.0]);
        let draw = SampleDraw::from_units(&p, vec![0, 1], vec![false, true]).unwrap();
        assert!((ht_mean(&draw, &p, 0, false).unwrap() - 7.0).abs() < 1e-12);
        assert!((ht_mean(&draw, &p, 0, true).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ht_mean_is_arm_mean_on_random_draws() {
        let p = random_pop(3, 50, 4);
        let mut rng = rng_for(4, &[]);
        for _ in 0..100 {
            let draw = SampleDraw::random_buckets(&p, 10, &mut rng).unwrap();
            for arm in [false, true] {
                let y = if arm { p.y1(0).unwrap() } else { p.y0(0).unwrap() };
                let values: Vec<f64> = draw.arm(arm).map(|i| y[i]).collect();
                let plain = values.iter().sum::<f64>() / values.len() as f64;
                assert!((ht_mean(&draw, &p, 0, arm).unwrap() - plain).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn welch_closed_form() {
        // Arms (0,1,2,3)+d vs (0,1,2,3): variance 5/3 per arm, n = 4.
        let control = [0.0, 1.0, 2.0, 3.0];
        let d = 1.7;
        let treated: Vec<f64> = control.iter().map(|v| v + d).collect();
        let t = welch_t_from_samples(&treated, &control).unwrap();
        assert!((t - d / (2.0 * (5.0 / 3.0) / 4.0_f64).sqrt()).abs() < 1e-12);
        assert_eq!(welch_t_from_samples(&control, &control).unwrap(), 0.0);
        assert_eq!(
            welch_t_from_samples(&[1.0, 1.0], &control),
            Err(EstimationError::ZeroVariance)
        );
        assert_eq!(welch_t_from_samples(&[1.0], &control), Err(EstimationError::ZeroVariance));
    }

    #[test]
    fn welch_matches_reference() {
        let p = random_pop(5, 40, 5);
        let mut rng = rng_for(6, &[]);
        for _ in 0..100 {
            let draw = SampleDraw::random_buckets(&p, 12, &mut rng).unwrap();
            let t1: Vec<f64> = draw.arm(true).map(|i| p.y1(0).unwrap()[i]).collect();
            let t0: Vec<f64> = draw.arm(false).map(|i| p.y0(0).unwrap()[i]).collect();
            let (n1, n0) = (t1.len() as f64, t0.len() as f64);
            let reference = (t1.iter().mean() - t0.iter().mean())
                / (t1.iter().variance() / n1 + t0.iter().variance() / n0).sqrt();
            assert!((welch_t(&draw, &p, 0).unwrap() - reference).abs() < 1e-10);
        }
    }

    #[test]
    fn definition_one_identity() {
        let mut rng = rng_for(7, &[]);
        let normal = Normal::new(1.0, 2.0).unwrap();
        let periods = 5;
        let n = 6 * 3;
        let mut draw_rows =
            || -> Vec<Vec<f64>> { (0..periods).map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect()).collect() };
        let p = Population::new(6, 3, draw_rows(), draw_rows()).unwrap();
        for subset in (0..6u32).combinations(3) {
            let subset: Vec<BucketId> = subset.into_iter().map(BucketId).collect();
            for t in 1..periods {
                for lag in 1..=t {
                    let direct = ate_subset(&p, &subset, t).unwrap() - ate_subset(&p, &subset, t - lag).unwrap();
                    assert!((direct - ate_tilde(&p, &subset, t, lag).unwrap()).abs() < 1e-12);
                }
            }
        }
        assert!(ate_tilde(&p, &[BucketId(0)], 1, 2).is_err());
    }

    #[test]
    fn enumeration_examples() {
        let p = int_pop(4, 2, vec![3, -1, 4, 1, -5, 9, 2, -6], vec![5, 3, -5, 8, 9, -7, 9, 3]);
        let pair = enumerate_unbiasedness(&p, 2, 0).unwrap();
        assert!(exact_equal(&pair));
        assert!(!pair.1.is_zero());

        let zero = int_pop(4, 2, vec![0; 8], vec![0; 8]);
        let pair = enumerate_unbiasedness(&zero, 2, 0).unwrap();
        assert!(pair.0.is_zero() && pair.1.is_zero());

        let p3 = int_pop(3, 2, vec![1, 2, 3, 4, 5, 6], vec![-3, 7, 0, 0, 2, 9]);
        assert!(exact_equal(&enumerate_unbiasedness(&p3, 1, 0).unwrap()));

        assert!(exact_equal(&enumerate_restricted_unbiasedness(&p, 3, 2, 0).unwrap()));
        assert_eq!(
            enumerate_restricted_unbiasedness(&p, 4, 2, 0).unwrap(),
            enumerate_unbiasedness(&p, 2, 0).unwrap()
        );
        let p5 = int_pop(5, 2, vec![1, -2, 3, 0, 4, 4, -9, 8, 7, 1], vec![0, 6, 2, -3, 1, 5, 5, 5, -8, 2]);
        assert!(exact_equal(&enumerate_restricted_unbiasedness(&p5, 2, 1, 0).unwrap()));
    }

    #[test]
    fn enumeration_limits() {
        let p = int_pop(3, 3, vec![0; 9], vec![0; 9]);
        assert!(matches!(
            enumerate_unbiasedness(&p, 1, 0),
            Err(EstimationError::UnequalSplit { .. })
        ));
        let big = int_pop(40, 2, vec![0; 80], vec![0; 80]);
        assert!(matches!(
            enumerate_unbiasedness(&big, 10, 0),
            Err(EstimationError::TooLarge { .. })
        ));
        assert!(enumerate_restricted_unbiasedness(&p, 1, 2, 0).is_err());
    }

    #[test]
    fn cor_star_cases() {
        assert_eq!(cor_star(&bits("0000"), &bits("0000")).unwrap(), Some(1.0));
        assert_eq!(cor_star(&bits("1111"), &bits("0110")).unwrap(), Some(0.0));
        assert_eq!(cor_star(&bits("0000"), &bits("1111")).unwrap(), Some(0.0));
        assert_eq!(cor_star(&bits("0101"), &bits("0101")).unwrap(), Some(1.0));
        assert_eq!(cor_star(&bits("0101"), &bits("1010")).unwrap(), Some(-1.0));
        assert_eq!(cor_star(&bits("0000"), &bits("0110")).unwrap(), None);
        assert_eq!(
            cor_star(&bits("01"), &bits("011")),
            Err(EstimationError::LengthMismatch { left: 2, right: 3 })
        );
    }

    #[test]
    fn delta_hat_examples() {
        let b = 2000;
        let days = 40;
        let mut rng = rng_for(8, &[]);
        let series: Vec<BitVector> = (0..days)
            .map(|_| BitVector::from_bools((0..b).map(|_| rng.random_bool(0.5))))
            .collect();
        let tolerance = 3.0 / ((b * (days - 1)) as f64).sqrt();
        assert_eq!(delta_hat(&series, tolerance), Ok(1));

        let fixed = bits("0110100111");
        assert_eq!(
            delta_hat(&vec![fixed; 10], 0.01),
            Err(EstimationError::NotFound { max_lag: 9 })
        );
        assert_eq!(delta_hat(&vec![BitVector::ones(50); 5], 0.01), Ok(1));
        assert_eq!(delta_hat(&[BitVector::ones(3)], 0.01), Err(EstimationError::EmptySeries));
        let na = vec![BitVector::zeros(4), bits("0110"), BitVector::zeros(4)];
        assert_eq!(mean_cor_by_lag(&na).unwrap(), vec![None, Some(1.0)]);
        let all_na = vec![BitVector::zeros(4), bits("0110")];
        assert_eq!(delta_hat(&all_na, 0.01), Err(EstimationError::AllNA));
    }

    #[test]
    fn inclusive_indexing_shifts_by_one() {
        let mut rng = rng_for(12, &[]);
        let series: Vec<BitVector> = (0..12)
            .map(|_| BitVector::from_bools((0..300).map(|_| rng.random_bool(0.3))))
            .collect();
        let lag = mean_cor_profile(&series, DeltaIndexing::Lag).unwrap();
        let inclusive = mean_cor_profile(&series, DeltaIndexing::Inclusive).unwrap();
        assert_eq!(inclusive.len(), 12);
        assert_eq!(inclusive[0], Some(1.0));
        assert_eq!(&inclusive[1..], &lag[..]);
        assert_eq!(delta_hat_with(&series, 0.2, DeltaIndexing::Inclusive), Ok(2));
    }

    #[test]
    fn single_experiment_trace_under_both_indexings() {
        // One experiment holds the same 10 of 100 buckets on days 1..=30 of 60.
        let mut busy = BitVector::ones(100);
        for b in 0..10 {
            busy.set(b, false);
        }
        let series: Vec<BitVector> = (1..=60)
            .map(|day| if day <= 30 { busy.clone() } else { BitVector::ones(100) })
            .collect();
        let inclusive = mean_cor_profile(&series, DeltaIndexing::Inclusive).unwrap();
        for d in 1..=30 {
            let expected = (31 - d) as f64 / (61 - d) as f64;
            assert!((inclusive[d - 1].unwrap() - expected).abs() < 1e-12);
        }
        assert_eq!(delta_hat_with(&series, 0.01, DeltaIndexing::Inclusive), Ok(31));
        assert_eq!(delta_hat(&series, 0.01), Ok(30));
    }

    fn pearson(a: &[bool], b: &[bool]) -> f64 {
        let x: Vec<f64> = a.iter().map(|&v| f64::from(u8::from(v))).collect();
        let y: Vec<f64> = b.iter().map(|&v| f64::from(u8::from(v))).collect();
        let (mx, my) = (x.iter().mean(), y.iter().mean());
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    proptest! {
        #[test]
        fn cor_star_range_symmetry_and_pearson(pairs in proptest::collection::vec(any::<(bool, bool)>(), 1..200)) {
            let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let (va, vb) = (BitVector::from_bools(a.clone()), BitVector::from_bools(b.clone()));
            let ab = cor_star(&va, &vb).unwrap();
            prop_assert_eq!(ab, cor_star(&vb, &va).unwrap());
            if let Some(c) = ab {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
            let varies = |v: &[bool]| v.iter().any(|&x| x) && v.iter().any(|&x| !x);
            if varies(&a) && varies(&b) {
                prop_assert!((ab.unwrap() - pearson(&a, &b)).abs() < 1e-9);
            }
        }

        #[test]
        fn unbiasedness_battery(
            b in 2u32..=5,
            nb in 1usize..=3,
            values in proptest::collection::vec((-9i64..=9, -9i64..=9), 15),
            k_seed in any::<u32>(),
        ) {
            let n = b as usize * nb;
            let (y0, y1): (Vec<i64>, Vec<i64>) = values.into_iter().take(n).unzip();
            let p = int_pop(b, nb, y0, y1);
            let ks: Vec<usize> = (1..=b as usize).filter(|k| k * nb % 2 == 0).collect();
            prop_assume!(!ks.is_empty());
            let k = ks[k_seed as usize % ks.len()];
            prop_assert!(exact_equal(&enumerate_unbiasedness(&p, k, 0).unwrap()));
            for m in k.max(2)..=b as usize {
                prop_assert!(exact_equal(&enumerate_restricted_unbiasedness(&p, m, k, 0).unwrap()));
            }
        }
    }
}
