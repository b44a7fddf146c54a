//! Seeded Monte Carlo studies.
//!
//! Two harnesses live here. [`run_sampling_distribution_sim`] compares the
//! difference-in-means estimator and the Welch t-statistic under random
//! sampling of units and of buckets, for outcomes with a bucket-level
//! component. [`run_program_sim`] simulates programs of exclusive experiments
//! and tracks how the availability and sampling vectors, and the bias of day-1
//! effect estimates, evolve with the lag from a random starting point.
//!
//! Every random stream is derived from the master seed and a label path with
//! [`crate::rng::rng_for`], so results do not depend on thread count:
//!
//! | stream | path |
//! |---|---|
//! | sampling sim population `p` | `[0, p]` |
//! | sampling sim draws for strategy `s`, sample `j` | `[1, p, s, j]` |
//! | program sim starting point `s` | `[0, s]` |
//! | program sim bucket effects of start `s` | `[1, s]` |
//! | program sim replication `r` of start `s` | `[2, s, r]` |

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::{AvailabilityVector, BitVector, SamplingVector};
use crate::coordination::{buckets_for_fraction, CoordinationError, ProgramId, ProgramState};
use crate::estimation::{cor_star, diff_in_means, welch_t, Population, SampleDraw};
use crate::rng::{rng_for, SimRng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimulationError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Estimation(#[from] crate::estimation::EstimationError),
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SimulationError::ConfigInvalid(msg.into()))
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest distance between the
/// empirical distribution functions.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Unbiased sample variance; `NaN` for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    crate::estimation::mean_and_variance(xs).map_or(f64::NAN, |(_, v)| v)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Sampling distributions under unit and bucket sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSimConfig {
    /// Number of simulated populations.
    pub replications: u32,
    pub population_size: u32,
    pub sample_size: u32,
    pub num_buckets: u32,
    pub bucket_size: u32,
    pub samples_per_population: u32,
    pub assignments_per_sample: u32,
    /// Weight `b` of the bucket-level component in `Y = b*Z + X`.
    pub icc_coefficient: f64,
    pub seed: u64,
}

impl Default for SamplingSimConfig {
    fn default() -> Self {
        Self {
            replications: 100,
            population_size: 10_000,
            sample_size: 1000,
            num_buckets: 20,
            bucket_size: 500,
            samples_per_population: 100,
            assignments_per_sample: 100,
            icc_coefficient: 1.0,
            seed: 0,
        }
    }
}

impl SamplingSimConfig {
    /// Default design with 20 populations, samples and assignments.
    pub fn desk_scale() -> Self {
        Self {
            replications: 20,
            samples_per_population: 20,
            assignments_per_sample: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_buckets == 0 || self.bucket_size == 0 {
            return invalid("num_buckets and bucket_size must be positive");
        }
        if u64::from(self.num_buckets) * u64::from(self.bucket_size) != u64::from(self.population_size) {
            return invalid("population_size must equal num_buckets * bucket_size");
        }
        if self.sample_size == 0 || !self.sample_size.is_multiple_of(self.bucket_size) || !self.sample_size.is_multiple_of(2) {
            return invalid("sample_size must be a positive even multiple of bucket_size");
        }
        if self.sample_size > self.population_size {
            return invalid("sample_size exceeds population_size");
        }
        if self.sample_size < 4 {
            return invalid("sample_size must allow two units per arm");
        }
        if self.replications == 0 || self.samples_per_population == 0 || self.assignments_per_sample == 0 {
            return invalid("replication counts must be positive");
        }
        if !self.icc_coefficient.is_finite() {
            return invalid("icc_coefficient must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Unit,
    Bucket,
}

impl SamplingStrategy {
    pub const ALL: [Self; 2] = [Self::Unit, Self::Bucket];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unit => "unit",
            Self::Bucket => "bucket",
        }
    }
}

/// One estimate from the sampling-distribution study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRecord {
    pub population: u32,
    pub sample: u32,
    pub assignment: u32,
    pub estimate: f64,
    pub t_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StrategySamples {
    pub records: Vec<SamplingRecord>,
}

impl StrategySamples {
    pub fn estimates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.estimate).collect()
    }

    pub fn t_stats(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t_stat).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSimResult {
    pub unit: StrategySamples,
    pub bucket: StrategySamples,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingSummary {
    pub draws_per_strategy: usize,
    pub ks_t_stat: f64,
    pub ks_estimate: f64,
    pub estimate_mean_unit: f64,
    pub estimate_mean_bucket: f64,
    pub estimate_var_unit: f64,
    pub estimate_var_bucket: f64,
    /// Bucket-sampling over unit-sampling estimator variance.
    pub estimate_var_ratio: f64,
    pub t_stat_var_unit: f64,
    pub t_stat_var_bucket: f64,
}

impl SamplingSimResult {
    pub fn strategy(&self, s: SamplingStrategy) -> &StrategySamples {
        match s {
            SamplingStrategy::Unit => &self.unit,
            SamplingStrategy::Bucket => &self.bucket,
        }
    }

    pub fn summary(&self) -> SamplingSummary {
        let (eu, eb) = (self.unit.estimates(), self.bucket.estimates());
        let (tu, tb) = (self.unit.t_stats(), self.bucket.t_stats());
        let (vu, vb) = (sample_variance(&eu), sample_variance(&eb));
        SamplingSummary {
            draws_per_strategy: eu.len(),
            ks_t_stat: ks_distance(&tu, &tb),
            ks_estimate: ks_distance(&eu, &eb),
            estimate_mean_unit: mean(&eu),
            estimate_mean_bucket: mean(&eb),
            estimate_var_unit: vu,
            estimate_var_bucket: vb,
            estimate_var_ratio: vb / vu,
            t_stat_var_unit: sample_variance(&tu),
            t_stat_var_bucket: sample_variance(&tb),
        }
    }
}

/// Null population: `Z` per bucket and `X` per unit, both Normal(1, 1);
/// `y0 = y1 = b*Z + X`.
pub fn generate_null_population<R: Rng + ?Sized>(cfg: &SamplingSimConfig, rng: &mut R) -> Result<Population> {
    let normal = Normal::new(1.0, 1.0).expect("valid normal");
    let nb = cfg.bucket_size as usize;
    let mut y = Vec::with_capacity(cfg.population_size as usize);
    for _ in 0..cfg.num_buckets {
        let z = normal.sample(rng);
        for _ in 0..nb {
            y.push(cfg.icc_coefficient * z + normal.sample(rng));
        }
    }
    Ok(Population::single_period(cfg.num_buckets, nb, y.clone(), y)?)
}

pub fn run_sampling_distribution_sim(cfg: &SamplingSimConfig) -> Result<SamplingSimResult> {
    cfg.validate()?;
    let per_population: Vec<[Vec<SamplingRecord>; 2]> = (0..cfg.replications)
        .into_par_iter()
        .map(|p| simulate_population(cfg, p))
        .collect::<Result<_>>()?;
    let mut result = SamplingSimResult {
        unit: StrategySamples::default(),
        bucket: StrategySamples::default(),
    };
    for [unit, bucket] in per_population {
        result.unit.records.extend(unit);
        result.bucket.records.extend(bucket);
    }
    Ok(result)
}

fn simulate_population(cfg: &SamplingSimConfig, p: u32) -> Result<[Vec<SamplingRecord>; 2]> {
    let pop = generate_null_population(cfg, &mut rng_for(cfg.seed, &[0, u64::from(p)]))?;
    let mut out: [Vec<SamplingRecord>; 2] = Default::default();
    for (s, strategy) in SamplingStrategy::ALL.into_iter().enumerate() {
        for j in 0..cfg.samples_per_population {
            let mut rng = rng_for(cfg.seed, &[1, u64::from(p), s as u64, u64::from(j)]);
            let first = match strategy {
                SamplingStrategy::Unit => SampleDraw::random_units(&pop, cfg.sample_size as usize, &mut rng)?,
                SamplingStrategy::Bucket => {
                    let k = (cfg.sample_size / cfg.bucket_size) as usize;
                    SampleDraw::random_buckets(&pop, k, &mut rng)?
                }
            };
            for a in 0..cfg.assignments_per_sample {
                let draw = if a == 0 { first.clone() } else { first.reassigned(&mut rng) };
                out[s].push(SamplingRecord {
                    population: p,
                    sample: j,
                    assignment: a,
                    estimate: diff_in_means(&draw, &pop, 0)?,
                    t_stat: welch_t(&draw, &pop, 0)?,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Programs of exclusive experiments

pub const L1: [u32; 19] = [1, 2, 3, 7, 7, 8, 8, 8, 12, 13, 14, 14, 14, 14, 15, 21, 21, 21, 30];
pub const L2: [u32; 2] = [21, 28];
pub const N1: [f64; 10] = [0.02, 0.02, 0.02, 0.02, 0.05, 0.05, 0.08, 0.09, 0.10, 0.10];
pub const N2: [f64; 2] = [0.20, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramSimConfig {
    /// Experiment lengths in days; one is drawn uniformly per start.
    pub length_distribution: Vec<u32>,
    /// Experiment sizes as fractions of the buckets; drawn uniformly per start.
    pub size_distribution: Vec<f64>,
    /// Occupancy the daily start loop tops up to.
    pub target_traffic: f64,
    pub num_buckets: u32,
    pub horizon_days: u32,
    pub num_starting_points: u32,
    pub replications_per_start: u32,
    pub effect_mean: f64,
    pub effect_variance: f64,
    /// Give starting-point experiments a uniform residual length in
    /// `1..=length`, as if they had started before day 1.
    pub residual_start_lengths: bool,
    pub seed: u64,
}

impl ProgramSimConfig {
    fn preset(lengths: &[u32], sizes: &[f64], target: f64, num_buckets: u32) -> Self {
        Self {
            length_distribution: lengths.to_vec(),
            size_distribution: sizes.to_vec(),
            target_traffic: target,
            num_buckets,
            horizon_days: 90,
            num_starting_points: 50,
            replications_per_start: 10_000,
            effect_mean: 3.0,
            effect_variance: 2.0,
            residual_start_lengths: true,
            seed: 0,
        }
    }

    /// Same design with 10 starting points of 1000 replications.
    pub fn desk_scale(mut self) -> Self {
        self.num_starting_points = 10;
        self.replications_per_start = 1000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_distribution.is_empty() || self.length_distribution.contains(&0) {
            return invalid("length_distribution must be non-empty with lengths >= 1");
        }
        if self.size_distribution.is_empty() {
            return invalid("size_distribution must be non-empty");
        }
        if self.num_buckets == 0 {
            return invalid("num_buckets must be positive");
        }
        for &s in &self.size_distribution {
            if let Err(e) = buckets_for_fraction(s, self.num_buckets) {
                return invalid(format!("size {s}: {e}"));
            }
        }
        if !(self.target_traffic > 0.0 && self.target_traffic <= 1.0) {
            return invalid("target_traffic must lie in (0, 1]");
        }
        if self.horizon_days < 2 {
            return invalid("horizon_days must be at least 2");
        }
        if self.num_starting_points == 0 || self.replications_per_start == 0 {
            return invalid("starting points and replications must be positive");
        }
        if !self.effect_mean.is_finite() || !(self.effect_variance >= 0.0 && self.effect_variance.is_finite()) {
            return invalid("effect_mean must be finite and effect_variance non-negative");
        }
        Ok(())
    }

    fn draw_experiment<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, u32) {
        let size = self.size_distribution[rng.random_range(0..self.size_distribution.len())];
        let length = self.length_distribution[rng.random_range(0..self.length_distribution.len())];
        (size, length)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub name: String,
    pub config: ProgramSimConfig,
}

/// Settings 1-6 with 10000 buckets followed by the 100-bucket variants
/// `appendix-1` to `appendix-6`, all at full scale (50 x 10000).
pub fn settings_catalog() -> Vec<Setting> {
    let designs: [(&[u32], &[f64], f64); 6] = [
        (&L1, &N1, 0.9),
        (&L1, &N1, 0.5),
        (&L2, &N1, 0.9),
        (&L1, &N2, 0.9),
        (&L2, &N2, 0.9),
        (&L2, &N2, 0.5),
    ];
    let main = designs.iter().enumerate().map(|(i, (l, n, t))| Setting {
        name: (i + 1).to_string(),
        config: ProgramSimConfig::preset(l, n, *t, 10_000),
    });
    let appendix = designs.iter().enumerate().map(|(i, (l, n, t))| Setting {
        name: format!("appendix-{}", i + 1),
        config: ProgramSimConfig::preset(l, n, *t, 100),
    });
    main.chain(appendix).collect()
}

pub fn setting(name: &str) -> Option<ProgramSimConfig> {
    settings_catalog()
        .into_iter()
        .find(|s| s.name == name)
        .map(|s| s.config)
}

/// Program state at the end of day 1 together with that day's vectors.
#[derive(Debug, Clone)]
pub struct StartingPoint {
    pub state: ProgramState,
    pub availability: AvailabilityVector,
    pub sampling: SamplingVector,
}

/// Start experiments on an empty program until the occupied fraction reaches
/// the target or the next drawn experiment does not fit.
pub fn generate_starting_point<R: Rng + ?Sized>(cfg: &ProgramSimConfig, rng: &mut R) -> Result<StartingPoint> {
    cfg.validate()?;
    let mut state = ProgramState::new(ProgramId(0), cfg.num_buckets)?;
    start_cohort(cfg, &mut state, rng)?;
    let (availability, sampling) = state.snapshot();
    Ok(StartingPoint {
        state,
        availability,
        sampling,
    })
}

/// Day-1 start loop, optionally with residual lengths.
fn start_cohort<R: Rng + ?Sized>(cfg: &ProgramSimConfig, state: &mut ProgramState, rng: &mut R) -> Result<()> {
    while state.occupied_fraction() < cfg.target_traffic {
        let (size, mut length) = cfg.draw_experiment(rng);
        if cfg.residual_start_lengths {
            length = rng.random_range(1..=length);
        }
        match state.start_experiment(size, length, rng) {
            Ok(_) => {}
            Err(CoordinationError::InsufficientBuckets { .. }) => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Daily start loop: top up to the target while drawn experiments fit.
/// Returns the summed effect and count of the newly sampled buckets.
fn start_until_target<R: Rng + ?Sized>(
    cfg: &ProgramSimConfig,
    state: &mut ProgramState,
    effects: &[f64],
    rng: &mut R,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    while state.occupied_fraction() < cfg.target_traffic {
        let (size, length) = cfg.draw_experiment(rng);
        match state.start_experiment(size, length, rng) {
            Ok(e) => {
                sum += e.buckets.iter().map(|b| effects[b.index()]).sum::<f64>();
                count += e.num_buckets();
            }
            Err(CoordinationError::InsufficientBuckets { .. }) => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((sum, count))
}

/// Per-lag observations from one replication; index `d - 1` is lag `d`.
#[derive(Debug, Clone, Default)]
struct ReplicationTrace {
    availability_cor: Vec<Option<f64>>,
    sampling_cor: Vec<Option<f64>>,
    pool_bias: Vec<Option<f64>>,
    sampled_bias: Vec<Option<f64>>,
}

fn replicate(
    cfg: &ProgramSimConfig,
    start: &StartingPoint,
    effects: &[f64],
    ate1: f64,
    rng: &mut SimRng,
) -> Result<ReplicationTrace> {
    let lags = (cfg.horizon_days - 1) as usize;
    let mut trace = ReplicationTrace {
        availability_cor: Vec::with_capacity(lags),
        sampling_cor: Vec::with_capacity(lags),
        pool_bias: Vec::with_capacity(lags),
        sampled_bias: Vec::with_capacity(lags),
    };
    // Day 1 samples from every bucket.
    let day1_sampled: Vec<f64> = start.sampling.iter_ones().map(|b| effects[b]).collect();
    trace.availability_cor.push(cor_star(&start.availability, &start.availability)?);
    trace.sampling_cor.push(cor_star(&start.sampling, &start.sampling)?);
    trace.pool_bias.push(Some(ate1 - mean(effects)));
    trace.sampled_bias.push((!day1_sampled.is_empty()).then(|| ate1 - mean(&day1_sampled)));

    let mut state = start.state.clone();
    let mut pool_sum: f64 = state.free_buckets().map(|b| effects[b.index()]).sum();
    for _ in 2..=lags {
        for stopped in state.advance_day() {
            pool_sum += stopped.buckets.iter().map(|b| effects[b.index()]).sum::<f64>();
        }
        let pool = state.available_count();
        trace.pool_bias.push((pool > 0).then(|| ate1 - pool_sum / pool as f64));
        let (sampled_sum, sampled) = start_until_target(cfg, &mut state, effects, rng)?;
        pool_sum -= sampled_sum;
        trace.sampled_bias.push((sampled > 0).then(|| ate1 - sampled_sum / sampled as f64));
        trace.availability_cor.push(cor_star(&start.availability, state.availability())?);
        trace.sampling_cor.push(cor_star(&start.sampling, state.sampled_today())?);
    }
    Ok(trace)
}

/// Aggregated metrics at one lag. `delta = d` compares day 1 with day `d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub delta: u32,
    pub availability_cor_mean: Option<f64>,
    pub sampling_cor_mean: Option<f64>,
    /// Mean over all replications of `ATE_1` minus the mean day-1 effect of
    /// the buckets available for sampling on day `delta`.
    pub ate1_bias_mean: Option<f64>,
    pub ate1_bias_sd: Option<f64>,
    /// Replications with a non-NA availability correlation.
    pub n_effective: u64,
    /// Mean over starting points of the absolute replication-averaged bias.
    pub ate1_abs_bias_mean: Option<f64>,
    pub ate1_abs_bias_se: Option<f64>,
    /// Mean bias of the buckets actually sampled on day `delta`.
    pub ate1_sampled_bias_mean: Option<f64>,
    /// Replications that started at least one experiment on day `delta`.
    pub n_sampled: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSeries {
    pub setting: String,
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "setting,delta,availability_cor_mean,sampling_cor_mean,ate1_bias_mean,ate1_bias_sd,n_effective,ate1_abs_bias_mean,ate1_abs_bias_se,ate1_sampled_bias_mean,n_sampled";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "NA".to_string(),
    }
}

impl MetricSeries {
    pub fn row(&self, delta: u32) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.delta == delta)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let fields = [
                self.setting.clone(),
                r.delta.to_string(),
                fmt_opt(r.availability_cor_mean),
                fmt_opt(r.sampling_cor_mean),
                fmt_opt(r.ate1_bias_mean),
                fmt_opt(r.ate1_bias_sd),
                r.n_effective.to_string(),
                fmt_opt(r.ate1_abs_bias_mean),
                fmt_opt(r.ate1_abs_bias_se),
                fmt_opt(r.ate1_sampled_bias_mean),
                r.n_sampled.to_string(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }

    fn sd(&self) -> Option<f64> {
        (self.n > 1).then(|| {
            let n = self.n as f64;
            ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0).sqrt()
        })
    }
}

/// Draw the day-1 bucket effects for a starting point.
pub fn draw_effects<R: Rng + ?Sized>(cfg: &ProgramSimConfig, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(cfg.effect_mean, cfg.effect_variance.sqrt()).expect("validated variance");
    (0..cfg.num_buckets).map(|_| normal.sample(rng)).collect()
}

pub fn run_program_sim(cfg: &ProgramSimConfig, setting_name: &str) -> Result<MetricSeries> {
    cfg.validate()?;
    let lags = (cfg.horizon_days - 1) as usize;
    let mut availability = vec![Moments::default(); lags];
    let mut sampling = vec![Moments::default(); lags];
    let mut bias = vec![Moments::default(); lags];
    let mut sampled = vec![Moments::default(); lags];
    let mut start_abs_bias = vec![Moments::default(); lags];

    for s in 0..u64::from(cfg.num_starting_points) {
        let start = generate_starting_point(cfg, &mut rng_for(cfg.seed, &[0, s]))?;
        let effects = draw_effects(cfg, &mut rng_for(cfg.seed, &[1, s]));
        let ate1 = mean(&effects);
        let traces: Vec<ReplicationTrace> = (0..u64::from(cfg.replications_per_start))
            .into_par_iter()
            .map(|r| replicate(cfg, &start, &effects, ate1, &mut rng_for(cfg.seed, &[2, s, r])))
            .collect::<Result<_>>()?;
        let mut start_bias = vec![Moments::default(); lags];
        for trace in &traces {
            for d in 0..lags {
                if let Some(v) = trace.availability_cor[d] {
                    availability[d].push(v);
                }
                if let Some(v) = trace.sampling_cor[d] {
                    sampling[d].push(v);
                }
                if let Some(v) = trace.pool_bias[d] {
                    bias[d].push(v);
                    start_bias[d].push(v);
                }
                if let Some(v) = trace.sampled_bias[d] {
                    sampled[d].push(v);
                }
            }
        }
        for d in 0..lags {
            if let Some(m) = start_bias[d].mean() {
                start_abs_bias[d].push(m.abs());
            }
        }
    }

    let rows = (0..lags)
        .map(|d| MetricRow {
            delta: d as u32 + 1,
            availability_cor_mean: availability[d].mean(),
            sampling_cor_mean: sampling[d].mean(),
            ate1_bias_mean: bias[d].mean(),
            ate1_bias_sd: bias[d].sd(),
            n_effective: availability[d].n,
            ate1_abs_bias_mean: start_abs_bias[d].mean(),
            ate1_abs_bias_se: start_abs_bias[d]
                .sd()
                .map(|sd| sd / (start_abs_bias[d].n as f64).sqrt()),
            ate1_sampled_bias_mean: sampled[d].mean(),
            n_sampled: sampled[d].n,
        })
        .collect();
    Ok(MetricSeries {
        setting: setting_name.to_string(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Availability trace around one long experiment

/// One long experiment started on day 1, optionally inside a background
/// program that keeps starting experiments up to its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongExperimentTrace {
    pub num_buckets: u32,
    pub long_length: u32,
    pub long_size: f64,
    pub days: u32,
    /// Background program; its `num_buckets` must match.
    pub background: Option<ProgramSimConfig>,
}

impl LongExperimentTrace {
    /// A 30-day experiment on 10% of 10000 buckets, observed for 60 days.
    pub fn standard() -> Self {
        Self {
            num_buckets: 10_000,
            long_length: 30,
            long_size: 0.10,
            days: 60,
            background: None,
        }
    }

    /// Daily post-start availability vectors for days `1..=days`.
    pub fn generate(&self, seed: u64) -> Result<Vec<BitVector>> {
        if self.days < 2 {
            return invalid("days must be at least 2");
        }
        if let Some(bg) = &self.background {
            bg.validate()?;
            if bg.num_buckets != self.num_buckets {
                return invalid("background num_buckets differs from the trace");
            }
        }
        let effects = vec![0.0; self.num_buckets as usize];
        let mut rng = rng_for(seed, &[]);
        let mut state = ProgramState::new(ProgramId(0), self.num_buckets)?;
        state.start_experiment(self.long_size, self.long_length, &mut rng)?;
        if let Some(bg) = &self.background {
            start_cohort(bg, &mut state, &mut rng)?;
        }
        let mut series = Vec::with_capacity(self.days as usize);
        series.push(state.availability().clone());
        for _ in 2..=self.days {
            state.advance_day();
            if let Some(bg) = &self.background {
                start_until_target(bg, &mut state, &effects, &mut rng)?;
            }
            series.push(state.availability().clone());
        }
        Ok(series)
    }
}
