//! Exact checks run by `bucket-reuse selftest`.

use serde::Serialize;

use bucket_reuse::bucketing::BucketId;
use bucket_reuse::estimation::{
    ate_subset, ate_tilde, enumerate_restricted_unbiasedness, enumerate_unbiasedness, exact_equal,
    Population,
};
use bucket_reuse::probability::{counting_identities_check, HypergeomParams, HypergeomTable};
use bucket_reuse::rng::{derive_seed, splitmix64};

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Small deterministic integer stream; enough for picking test populations.
struct Stream(u64);

impl Stream {
    fn next(&mut self) -> u64 {
        self.0 = splitmix64(self.0);
        self.0
    }

    fn range(&mut self, lo: i64, hi: i64) -> i64 {
        lo + (self.next() % (hi - lo + 1) as u64) as i64
    }
}

fn random_population(s: &mut Stream, b: u32, nb: usize, periods: usize) -> Population<i64> {
    let n = b as usize * nb;
    let mut rows = || -> Vec<Vec<i64>> {
        (0..periods).map(|_| (0..n).map(|_| s.range(-20, 20)).collect()).collect()
    };
    let y0 = rows();
    let y1 = rows();
    Population::new(b, nb, y0, y1).expect("valid shape")
}

fn unbiasedness(seed: u64) -> Check {
    let mut s = Stream(derive_seed(seed, &[0]));
    let mut cases = 0;
    let mut failures = Vec::new();
    for i in 0..30 {
        let b = s.range(2, 6) as u32;
        let nb = s.range(1, 3) as usize;
        let pop = random_population(&mut s, b, nb, 1);
        for k in (1..=b as usize).filter(|k| (k * nb).is_multiple_of(2)) {
            cases += 1;
            match enumerate_unbiasedness(&pop, k, 0) {
                Ok(pair) if exact_equal(&pair) => {}
                Ok(pair) => failures.push(format!("population {i} k={k}: {} vs {}", pair.0, pair.1)),
                Err(e) => failures.push(format!("population {i} k={k}: {e}")),
            }
            for m in k.max(2)..b as usize {
                cases += 1;
                match enumerate_restricted_unbiasedness(&pop, m, k, 0) {
                    Ok(pair) if exact_equal(&pair) => {}
                    Ok(pair) => failures.push(format!("population {i} m={m} k={k}: {} vs {}", pair.0, pair.1)),
                    Err(e) => failures.push(format!("population {i} m={m} k={k}: {e}")),
                }
            }
        }
    }
    summarize("bucket sampling unbiasedness (exact enumeration)", cases, failures)
}

fn lagged_identity(seed: u64) -> Check {
    let mut s = Stream(derive_seed(seed, &[1]));
    let periods = 4;
    let pop = random_population(&mut s, 5, 2, periods).to_f64();
    let mut cases = 0;
    let mut failures = Vec::new();
    for mask in 1u32..(1 << 5) {
        let subset: Vec<BucketId> = (0..5).filter(|j| mask >> j & 1 == 1).map(BucketId).collect();
        for t in 1..periods {
            for lag in 1..=t {
                cases += 1;
                let direct = ate_subset(&pop, &subset, t).and_then(|a| Ok(a - ate_subset(&pop, &subset, t - lag)?));
                let tilde = ate_tilde(&pop, &subset, t, lag);
                match (direct, tilde) {
                    (Ok(d), Ok(v)) if (d - v).abs() <= 1e-9 => {}
                    (d, v) => failures.push(format!("mask {mask:05b} t={t} lag={lag}: {d:?} vs {v:?}")),
                }
            }
        }
    }
    summarize("lagged subset ATE identity", cases, failures)
}

fn counting(_: u64) -> Check {
    let mut cases = 0;
    let mut failures = Vec::new();
    for b in 1..=30u64 {
        for k in 1..=b {
            cases += 1;
            if !counting_identities_check(b, k) {
                failures.push(format!("B={b} k={k}"));
            }
        }
    }
    summarize("bucket sample counting identities", cases, failures)
}

fn hypergeometric_mass(_: u64) -> Check {
    let mut cases = 0;
    let mut failures = Vec::new();
    for (pop, succ, draws) in [(10, 3, 4), (64, 20, 30), (100, 50, 10), (1000, 100, 100), (10000, 1000, 1000)] {
        cases += 1;
        let p = HypergeomParams::new(pop, succ, draws).expect("valid parameters");
        let total: f64 = HypergeomTable::new(&p).iter().map(|(_, m)| m).sum();
        if (total - 1.0).abs() > 1e-9 {
            failures.push(format!("({pop},{succ},{draws}) sums to {total}"));
        }
    }
    summarize("hypergeometric mass sums to one", cases, failures)
}

fn summarize(name: &str, cases: usize, failures: Vec<String>) -> Check {
    let detail = if failures.is_empty() {
        format!("{cases} cases")
    } else {
        format!("{} of {cases} cases failed; first: {}", failures.len(), failures[0])
    };
    Check {
        name: name.to_string(),
        passed: failures.is_empty(),
        detail,
    }
}

pub fn run(seed: u64) -> Vec<Check> {
    [unbiasedness, lagged_identity, counting, hypergeometric_mass]
        .iter()
        .map(|check| check(seed))
        .collect()
}
