//! Salted hash bucketing of unit identifiers.
//!
//! A unit is mapped to bucket `xxh3_64(id || 0x1F || salt) mod B`. The
//! separator byte keeps `("ab", "c")` and `("a", "bc")` apart. XXH3 passes the
//! SMHasher avalanche and bias suites; the identifier below is written into
//! every run's metadata so that results can be reproduced bit for bit.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use xxhash_rust::xxh3::Xxh3;

/// Identifier of the concrete bucketing function.
pub const HASH_FUNCTION_ID: &str = "xxh3_64(id || 0x1f || salt) mod B";

const SALT_SEPARATOR: u8 = 0x1F;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BucketingError {
    #[error("unit id must be non-empty")]
    EmptyUnitId,
    #[error("number of buckets must be at least 1")]
    NoBuckets,
    #[error("uniformity check needs at least {required} ids for {buckets} buckets, got {got}")]
    TooFewIds {
        got: usize,
        required: usize,
        buckets: u32,
    },
    #[error("2^{0} does not fit the path counter (max exponent 62)")]
    Overflow(u32),
}

/// Opaque, non-empty unit identifier (e.g. a user id).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitId(Vec<u8>);

impl UnitId {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, BucketingError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(BucketingError::EmptyUnitId);
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl TryFrom<&str> for UnitId {
    type Error = BucketingError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value.as_bytes())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Salt(Vec<u8>);

impl Salt {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Salt {
    fn from(value: &str) -> Self {
        Self::new(value.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BucketId(pub u32);

impl BucketId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketingConfig {
    num_buckets: u32,
    salt: Salt,
}

impl BucketingConfig {
    pub fn new(num_buckets: u32, salt: Salt) -> Result<Self, BucketingError> {
        if num_buckets == 0 {
            return Err(BucketingError::NoBuckets);
        }
        Ok(Self { num_buckets, salt })
    }

    pub fn num_buckets(&self) -> u32 {
        self.num_buckets
    }

    pub fn salt(&self) -> &Salt {
        &self.salt
    }
}

/// The raw 64-bit salted hash of a unit id.
pub fn salted_hash64(id: &UnitId, salt: &Salt) -> u64 {
    let mut hasher = Xxh3::new();
    hasher.update(id.as_bytes());
    hasher.update(&[SALT_SEPARATOR]);
    hasher.update(salt.as_bytes());
    hasher.digest()
}

pub fn hash_to_bucket(id: &UnitId, cfg: &BucketingConfig) -> BucketId {
    let bucket = salted_hash64(id, &cfg.salt) % u64::from(cfg.num_buckets);
    BucketId(bucket as u32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformityReport {
    pub counts: Vec<u64>,
    pub chi_square: f64,
    pub p_value: f64,
}

/// Pearson chi-square goodness of fit of the bucket counts against the
/// uniform expectation `|ids| / B`, with `B - 1` degrees of freedom.
pub fn uniformity_report(
    ids: &[UnitId],
    cfg: &BucketingConfig,
) -> Result<UniformityReport, BucketingError> {
    let buckets = cfg.num_buckets as usize;
    let required = buckets.saturating_mul(10);
    if ids.len() < required {
        return Err(BucketingError::TooFewIds {
            got: ids.len(),
            required,
            buckets: cfg.num_buckets,
        });
    }
    let mut counts = vec![0u64; buckets];
    for id in ids {
        counts[hash_to_bucket(id, cfg).index()] += 1;
    }
    let expected = ids.len() as f64 / buckets as f64;
    let chi_square: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let p_value = if buckets == 1 {
        1.0
    } else {
        chi_square_survival(chi_square, (buckets - 1) as f64)
    };
    Ok(UniformityReport {
        counts,
        chi_square,
        p_value,
    })
}

/// Upper tail probability of a chi-square variate.
pub fn chi_square_survival(statistic: f64, dof: f64) -> f64 {
    let dist = ChiSquared::new(dof).expect("chi-square degrees of freedom must be positive");
    dist.sf(statistic)
}

/// Number of distinct experience paths when `num_experiments` experiments run
/// non-exclusively: every unit is either in or out of each one.
pub fn path_count_nonexclusive(num_experiments: u32) -> Result<u64, BucketingError> {
    if num_experiments > 62 {
        return Err(BucketingError::Overflow(num_experiments));
    }
    Ok(1u64 << num_experiments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> UnitId {
        UnitId::try_from(s).unwrap()
    }

    #[test]
    fn single_bucket_is_zero() {
        let cfg = BucketingConfig::new(1, "s".into()).unwrap();
        assert_eq!(hash_to_bucket(&id("u"), &cfg), BucketId(0));
    }

    #[test]
    fn repeated_calls_agree() {
        let cfg = BucketingConfig::new(100, "s".into()).unwrap();
        assert_eq!(hash_to_bucket(&id("u"), &cfg), hash_to_bucket(&id("u"), &cfg));
    }

    #[test]
    fn separator_prevents_concatenation_collisions() {
        let a = salted_hash64(&id("ab"), &"c".into());
        let b = salted_hash64(&id("a"), &"bc".into());
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(UnitId::new(Vec::new()), Err(BucketingError::EmptyUnitId));
        assert_eq!(
            BucketingConfig::new(0, Salt::default()),
            Err(BucketingError::NoBuckets)
        );
    }

    #[test]
    fn too_few_ids() {
        let cfg = BucketingConfig::new(10, "s".into()).unwrap();
        let ids: Vec<UnitId> = (0..99).map(|i| id(&i.to_string())).collect();
        assert!(matches!(
            uniformity_report(&ids, &cfg),
            Err(BucketingError::TooFewIds { got: 99, required: 100, .. })
        ));
    }

    #[test]
    fn identical_ids_fail_uniformity() {
        let cfg = BucketingConfig::new(2, "s".into()).unwrap();
        let ids = vec![id("same"); 1000];
        let report = uniformity_report(&ids, &cfg).unwrap();
        assert!(report.counts.contains(&1000));
        assert!(report.p_value < 1e-100);
    }

    #[test]
    fn one_bucket_report_is_trivial() {
        let cfg = BucketingConfig::new(1, "s".into()).unwrap();
        let ids: Vec<UnitId> = (0..10).map(|i| id(&i.to_string())).collect();
        let report = uniformity_report(&ids, &cfg).unwrap();
        assert_eq!(report.counts, vec![10]);
        assert_eq!(report.chi_square, 0.0);
        assert_eq!(report.p_value, 1.0);
    }

    #[test]
    fn path_counts() {
        assert_eq!(path_count_nonexclusive(0), Ok(1));
        assert_eq!(path_count_nonexclusive(5), Ok(32));
        assert_eq!(path_count_nonexclusive(10), Ok(1024));
        assert_eq!(path_count_nonexclusive(62), Ok(1 << 62));
        assert_eq!(path_count_nonexclusive(63), Err(BucketingError::Overflow(63)));
    }
}
