//! Exact hypergeometric and combinatorial calculators for bucket-count design
//! questions: how contaminated a small experiment can get, how far the overlap
//! of two independently sampled experiments strays from its expectation, and
//! how many buckets a platform needs.
//!
//! Window probabilities are evaluated as CDF differences, `P(lo < X <= hi) =
//! F(hi) - F(lo)`, with the window endpoints snapped to integers when they are
//! within floating-point noise of one.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use statrs::function::factorial::ln_binomial;

/// Populations up to this size are evaluated in exact rational arithmetic.
pub const EXACT_POPULATION_LIMIT: u64 = 64;

/// Experiment size at which an overlap margin is quoted. Margins scale in
/// proportion to the size of the second experiment, i.e. a margin of 0.1pp
/// for a 10pp experiment is a margin of 0.05pp for a 5pp experiment.
pub const OVERLAP_REFERENCE_SIZE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProbabilityError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

fn invalid(msg: impl Into<String>) -> ProbabilityError {
    ProbabilityError::InvalidParams(msg.into())
}

/// `HypGeom(population, successes, draws)`: number of successes in `draws`
/// draws without replacement from `population` items of which `successes` are
/// marked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HypergeomParams {
    population: u64,
    successes: u64,
    draws: u64,
}

impl HypergeomParams {
    pub fn new(population: u64, successes: u64, draws: u64) -> Result<Self, ProbabilityError> {
        if successes > population {
            return Err(invalid(format!(
                "successes {successes} exceed population {population}"
            )));
        }
        if draws > population {
            return Err(invalid(format!("draws {draws} exceed population {population}")));
        }
        Ok(Self {
            population,
            successes,
            draws,
        })
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    pub fn successes(&self) -> u64 {
        self.successes
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Smallest and largest attainable success counts.
    pub fn support(&self) -> (u64, u64) {
        let lo = (self.draws + self.successes).saturating_sub(self.population);
        let hi = self.successes.min(self.draws);
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        if self.population == 0 {
            return 0.0;
        }
        self.draws as f64 * self.successes as f64 / self.population as f64
    }

    fn mode(&self) -> u64 {
        let (lo, hi) = self.support();
        let m = ((self.draws as u128 + 1) * (self.successes as u128 + 1)
            / (self.population as u128 + 2)) as u64;
        m.clamp(lo, hi)
    }
}

/// Exact binomial coefficient.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Exact probability mass as a rational number.
pub fn hypergeom_pmf_exact(p: &HypergeomParams, x: u64) -> BigRational {
    let (lo, hi) = p.support();
    if x < lo || x > hi {
        return BigRational::zero();
    }
    let numer = binomial(p.successes, x) * binomial(p.population - p.successes, p.draws - x);
    let denom = binomial(p.population, p.draws);
    BigRational::new(numer.into(), denom.into())
}

/// Probability mass at `x`; zero outside the support. Small populations go
/// through exact arithmetic, larger ones through log-binomials.
pub fn hypergeom_pmf(p: &HypergeomParams, x: u64) -> f64 {
    let (lo, hi) = p.support();
    if x < lo || x > hi {
        return 0.0;
    }
    if p.population <= EXACT_POPULATION_LIMIT {
        return hypergeom_pmf_exact(p, x).to_f64().unwrap_or(0.0);
    }
    let ln = ln_binomial(p.successes, x) + ln_binomial(p.population - p.successes, p.draws - x)
        - ln_binomial(p.population, p.draws);
    ln.exp()
}

/// The whole distribution over its support, indexed from `support().0`.
///
/// Built by the ratio recurrence outward from the mode and normalized, which
/// keeps the total mass at 1 to machine precision even for populations in the
/// millions.
#[derive(Debug, Clone)]
pub struct HypergeomTable {
    first: u64,
    probs: Vec<f64>,
}

impl HypergeomTable {
    pub fn new(p: &HypergeomParams) -> Self {
        let (lo, hi) = p.support();
        let len = (hi - lo + 1) as usize;
        if p.population <= EXACT_POPULATION_LIMIT {
            let probs = (lo..=hi)
                .map(|x| hypergeom_pmf_exact(p, x).to_f64().unwrap_or(0.0))
                .collect();
            return Self { first: lo, probs };
        }

        let (big_k, k_s, n) = (p.population as f64, p.successes as f64, p.draws as f64);
        let mode = p.mode();
        let mut weights = vec![0.0f64; len];
        let m = (mode - lo) as usize;
        weights[m] = 1.0;
        for i in m..len - 1 {
            let x = (lo + i as u64) as f64;
            let ratio = (k_s - x) * (n - x) / ((x + 1.0) * (big_k - k_s - n + x + 1.0));
            weights[i + 1] = weights[i] * ratio;
        }
        for i in (1..=m).rev() {
            let x = (lo + i as u64) as f64;
            let ratio = x * (big_k - k_s - n + x) / ((k_s - x + 1.0) * (n - x + 1.0));
            weights[i - 1] = weights[i] * ratio;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self {
            first: lo,
            probs: weights,
        }
    }

    pub fn pmf(&self, x: u64) -> f64 {
        if x < self.first {
            return 0.0;
        }
        self.probs
            .get((x - self.first) as usize)
            .copied()
            .unwrap_or(0.0)
    }

    /// `(x, pmf(x))` over the support.
    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(move |(i, &p)| (self.first + i as u64, p))
    }

    /// `P(lo < X <= hi)` for real endpoints.
    pub fn window(&self, lo: f64, hi: f64) -> f64 {
        let lo = snap_to_integer(lo);
        let hi = snap_to_integer(hi);
        self.iter()
            .filter(|&(x, _)| {
                let x = x as f64;
                x > lo && x <= hi
            })
            .map(|(_, p)| p)
            .sum()
    }
}

/// Snap values within floating-point noise of an integer onto it, so that a
/// window edge computed as e.g. `(0.5 + 0.03) * 1000` lands exactly on 530.
fn snap_to_integer(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        v
    }
}

/// Probability that a sample of `draws` buckets taken from a pool of
/// `bad_pool` previously badly treated and `neutral_pool` neutral buckets has
/// a bad share inside `(center - margin, center + margin]`.
pub fn bad_bucket_window_prob(
    bad_pool: u64,
    neutral_pool: u64,
    draws: u64,
    center: f64,
    margin: f64,
) -> Result<f64, ProbabilityError> {
    if draws == 0 {
        return Err(invalid("draws must be at least 1"));
    }
    if !(center.is_finite() && margin.is_finite() && margin >= 0.0) {
        return Err(invalid("center and margin must be finite, margin non-negative"));
    }
    let params = HypergeomParams::new(bad_pool + neutral_pool, bad_pool, draws)?;
    let table = HypergeomTable::new(&params);
    let d = draws as f64;
    Ok(table.window((center - margin) * d, (center + margin) * d))
}

/// Half-up rounding of `fraction * total` to a whole count.
pub fn round_half_up(fraction: f64, total: u64) -> u64 {
    let scaled = snap_to_integer(fraction * total as f64 * 2.0) / 2.0;
    (scaled + 0.5).floor().max(0.0) as u64
}

/// Probability that the share of experiment 2's buckets that also belong to
/// experiment 1 lies in `(f1 - share_margin, f1 + share_margin]`, where the
/// two experiments are sampled independently from `buckets` buckets.
pub fn overlap_window_prob(
    buckets: u64,
    frac1: f64,
    frac2: f64,
    share_margin: f64,
) -> Result<f64, ProbabilityError> {
    for f in [frac1, frac2] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid(format!("experiment fraction {f} outside (0, 1]")));
        }
    }
    if !(share_margin > 0.0 && share_margin.is_finite()) {
        return Err(invalid("margin must be positive"));
    }
    let k1 = round_half_up(frac1, buckets);
    let k2 = round_half_up(frac2, buckets);
    if k1 == 0 || k2 == 0 {
        return Err(invalid("experiment rounds to zero buckets"));
    }
    let params = HypergeomParams::new(buckets, k1, k2)?;
    let table = HypergeomTable::new(&params);
    let center = k1 as f64 / buckets as f64;
    let n = k2 as f64;
    Ok(table.window((center - share_margin) * n, (center + share_margin) * n))
}

/// Probability that two independently sampled experiments of relative sizes
/// `frac1` and `frac2` overlap within `margin_pp` of the expected overlap
/// `frac1 * frac2`.
///
/// `margin_pp` is quoted (as a proportion of the population) for an
/// experiment of [`OVERLAP_REFERENCE_SIZE`] and scales with `frac2`; a
/// `margin_pp` of 0.001 means the overlap may deviate by 1% of experiment 2's
/// sample.
pub fn overlap_within_margin_prob(
    buckets: u64,
    frac1: f64,
    frac2: f64,
    margin_pp: f64,
) -> Result<f64, ProbabilityError> {
    overlap_window_prob(buckets, frac1, frac2, margin_pp / OVERLAP_REFERENCE_SIZE)
}

/// Total number of buckets needed so that an experiment of the smallest
/// allowed relative size `s` can itself be split into shares of size `s`:
/// the smallest experiment holds `ceil(1/s)` buckets and the population
/// `ceil(ceil(1/s) / s)`.
pub fn min_buckets_for_smallest_experiment(s: f64) -> Result<u64, ProbabilityError> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(invalid(format!("smallest experiment size {s} outside (0, 1]")));
    }
    let inner = snap_to_integer(1.0 / s).ceil();
    Ok(snap_to_integer(inner / s).ceil() as u64)
}

/// Number of distinct bucket samples, `C(B, k)`.
pub fn num_bucket_samples(buckets: u64, sample_buckets: u64) -> BigUint {
    binomial(buckets, sample_buckets)
}

/// Checks `C(B, k) = (B / k) * C(B - 1, k - 1)` exactly, in the
/// division-free form `k * C(B, k) = B * C(B - 1, k - 1)`.
pub fn counting_identities_check(buckets: u64, sample_buckets: u64) -> bool {
    if sample_buckets == 0 || sample_buckets > buckets {
        return false;
    }
    binomial(buckets, sample_buckets) * sample_buckets
        == binomial(buckets - 1, sample_buckets - 1) * buckets
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(k: u64, ks: u64, n: u64) -> HypergeomParams {
        HypergeomParams::new(k, ks, n).unwrap()
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(HypergeomParams::new(4, 5, 1).is_err());
        assert!(HypergeomParams::new(4, 1, 5).is_err());
    }

    #[test]
    fn small_worked_examples() {
        assert!((hypergeom_pmf(&params(4, 2, 2), 2) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(hypergeom_pmf(&params(2, 1, 1), 1), 0.5);
        assert_eq!(hypergeom_pmf(&params(4, 2, 2), 3), 0.0);
    }

    #[test]
    fn table_matches_log_gamma_path() {
        let p = params(100_000, 5_000, 5_000);
        let table = HypergeomTable::new(&p);
        for x in [200, 240, 250, 260, 300] {
            let direct = hypergeom_pmf(&p, x);
            assert!((table.pmf(x) - direct).abs() <= 1e-9 * direct, "x={x}");
        }
    }

    #[test]
    fn normalization_and_mean_large() {
        for p in [
            params(1_000_000, 500_000, 1_000),
            params(1_000_000, 1_000, 999_000),
            params(100_000, 10_000, 10_000),
            params(65, 30, 20),
        ] {
            let table = HypergeomTable::new(&p);
            let total: f64 = table.iter().map(|(_, q)| q).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let mean: f64 = table.iter().map(|(x, q)| x as f64 * q).sum();
            assert!((mean - p.mean()).abs() < 1e-9 * p.mean().max(1.0), "{p:?}");
        }
    }

    #[test]
    fn degenerate_supports() {
        let t = HypergeomTable::new(&params(10, 10, 3));
        assert_eq!(t.pmf(3), 1.0);
        let t = HypergeomTable::new(&params(0, 0, 0));
        assert_eq!(t.pmf(0), 1.0);
        let t = HypergeomTable::new(&params(1000, 0, 10));
        assert_eq!(t.pmf(0), 1.0);
    }

    #[test]
    fn bad_bucket_examples() {
        assert_eq!(bad_bucket_window_prob(1, 1, 1, 0.5, 0.49).unwrap(), 0.0);
        assert!((bad_bucket_window_prob(1, 1, 1, 0.5, 0.6).unwrap() - 1.0).abs() < 1e-15);
        assert!((bad_bucket_window_prob(2, 2, 2, 0.5, 0.75).unwrap() - 1.0).abs() < 1e-15);
        let p = bad_bucket_window_prob(1000, 1000, 1000, 0.5, 0.03).unwrap();
        assert!((p - 0.9927).abs() < 1e-4, "{p}");
        assert!(bad_bucket_window_prob(1, 1, 0, 0.5, 0.1).is_err());
        assert!(bad_bucket_window_prob(1, 1, 3, 0.5, 0.1).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(0.10, 1000), 100);
        assert_eq!(round_half_up(0.0005, 1000), 1);
        assert_eq!(round_half_up(0.0004, 1000), 0);
        assert_eq!(round_half_up(0.045, 100), 5);
        assert_eq!(round_half_up(0.035, 100), 4);
    }

    #[test]
    fn sizing() {
        assert_eq!(min_buckets_for_smallest_experiment(0.001), Ok(1_000_000));
        assert_eq!(min_buckets_for_smallest_experiment(0.0005), Ok(4_000_000));
        assert_eq!(min_buckets_for_smallest_experiment(1.0), Ok(1));
        assert_eq!(min_buckets_for_smallest_experiment(0.1), Ok(100));
        assert!(min_buckets_for_smallest_experiment(0.0).is_err());
    }

    #[test]
    fn sample_counts() {
        assert_eq!(num_bucket_samples(4, 2), BigUint::from(6u32));
        assert_eq!(num_bucket_samples(20, 10), BigUint::from(184_756u32));
        assert_eq!(num_bucket_samples(17, 0), BigUint::one());
        assert!(counting_identities_check(4, 2));
        assert!(counting_identities_check(10, 5));
        assert!(counting_identities_check(9, 9));
        assert!(!counting_identities_check(9, 0));
    }

    #[test]
    fn overlap_is_monotone_along_table_grid() {
        for f in [0.05, 0.10] {
            let probs: Vec<f64> = [1000u64, 2000, 10_000, 50_000, 100_000]
                .iter()
                .map(|&b| overlap_within_margin_prob(b, f, f, 0.001).unwrap())
                .collect();
            assert!(probs.windows(2).all(|w| w[0] <= w[1]), "{probs:?}");
        }
    }

    /// Counts the `draws`-subsets of `0..population` (the first `successes`
    /// items marked) containing exactly `x` marked items.
    fn enumerate_subsets(population: u64, successes: u64, draws: u64, x: u64) -> (u64, u64) {
        let mut hits = 0;
        let mut total = 0;
        for mask in 0u32..(1 << population) {
            if u64::from(mask.count_ones()) != draws {
                continue;
            }
            total += 1;
            let marked = u64::from((mask & ((1u32 << successes) - 1)).count_ones());
            if marked == x {
                hits += 1;
            }
        }
        (hits, total)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn pmf_matches_subset_enumeration(k in 0u64..=12, a in 0u64..=12, b in 0u64..=12, x in 0u64..=12) {
            let ks = a.min(k);
            let n = b.min(k);
            let p = params(k, ks, n);
            let (hits, total) = enumerate_subsets(k, ks, n, x);
            let expected = BigRational::new(hits.into(), total.into());
            prop_assert_eq!(hypergeom_pmf_exact(&p, x), expected.clone());
            prop_assert!((hypergeom_pmf(&p, x) - expected.to_f64().unwrap()).abs() < 1e-15);
        }

        #[test]
        fn pmf_is_symmetric_in_successes_and_draws(k in 0u64..3000, a in 0u64..3000, b in 0u64..3000, x in 0u64..3000) {
            let ks = a.min(k);
            let n = b.min(k);
            let lhs = hypergeom_pmf(&params(k, ks, n), x);
            let rhs = hypergeom_pmf(&params(k, n, ks), x);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(rhs).max(1e-300));
        }

        #[test]
        fn table_normalizes(k in 1u64..200_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let ks = (a * k as f64) as u64;
            let n = (b * k as f64) as u64;
            let p = params(k, ks, n);
            let table = HypergeomTable::new(&p);
            let total: f64 = table.iter().map(|(_, q)| q).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let mean: f64 = table.iter().map(|(x, q)| x as f64 * q).sum();
            prop_assert!((mean - p.mean()).abs() < 1e-9 * p.mean().max(1.0));
        }
    }
}
