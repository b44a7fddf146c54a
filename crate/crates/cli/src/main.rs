use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use bucket_reuse::bits::BitVector;
use bucket_reuse::bucketing::{hash_to_bucket, BucketingConfig, Salt, UnitId, HASH_FUNCTION_ID};
use bucket_reuse::coordination::{ProgramId, ProgramState};
use bucket_reuse::estimation::{estimate_delta_with, DeltaIndexing, DEFAULT_DELTA_TOLERANCE};
use bucket_reuse::probability::{
    bad_bucket_window_prob, min_buckets_for_smallest_experiment, num_bucket_samples,
    overlap_within_margin_prob,
};
use bucket_reuse::rng::rng_for;
use bucket_reuse::simulation::{
    run_program_sim, run_sampling_distribution_sim, setting, ProgramSimConfig, SamplingSimConfig,
};

mod selftest;

const SETTING_NAMES: [&str; 13] = [
    "1", "2", "3", "4", "5", "6", "appendix-1", "appendix-2", "appendix-3", "appendix-4",
    "appendix-5", "appendix-6", "custom",
];

#[derive(Parser)]
#[command(name = "bucket-reuse", version, about = "Bucket reuse toolkit for online experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map unit ids to buckets; prints `id,bucket` CSV rows.
    Bucketize {
        #[arg(long)]
        salt: String,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        buckets: u32,
        /// Unit id to hash (repeatable).
        #[arg(long = "id", conflicts_with = "ids_file")]
        ids: Vec<String>,
        /// File with one unit id per line; blank lines are skipped.
        #[arg(long)]
        ids_file: Option<PathBuf>,
    },
    /// Replay a start schedule and print daily availability as CSV.
    Coordinate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the final program state as JSON.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Hypergeometric overlap and contamination probabilities.
    #[command(subcommand)]
    Prob(ProbCommand),
    /// Sizing rules.
    #[command(subcommand)]
    Size(SizeCommand),
    /// Sample counts.
    #[command(subcommand)]
    Count(CountCommand),
    /// Dependency estimators.
    #[command(subcommand)]
    Estimate(EstimateCommand),
    /// Monte Carlo studies.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Run the exact enumeration oracles and identity checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ProbCommand {
    /// Chance that two experiments overlap within a margin of the expected overlap.
    Overlap {
        #[arg(long)]
        buckets: u64,
        #[arg(long)]
        frac1: f64,
        #[arg(long)]
        frac2: f64,
        /// Allowed deviation in population proportion, quoted for a 10% experiment.
        #[arg(long)]
        margin_pp: f64,
    },
    /// Chance that the bad-bucket share of a sample falls in a window.
    BadBuckets {
        #[arg(long)]
        bad: u64,
        #[arg(long)]
        neutral: u64,
        #[arg(long)]
        draws: u64,
        #[arg(long)]
        margin: f64,
        #[arg(long, default_value_t = 0.5)]
        center: f64,
    },
}

#[derive(Subcommand)]
enum SizeCommand {
    /// Buckets needed so the smallest experiment can be split at its own size.
    MinBuckets {
        #[arg(long)]
        smallest: f64,
    },
}

#[derive(Subcommand)]
enum CountCommand {
    /// Number of distinct bucket samples, C(B, k).
    Samples {
        #[arg(long)]
        buckets: u64,
        #[arg(long)]
        sample_buckets: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Indexing {
    Lag,
    Inclusive,
}

#[derive(Subcommand)]
enum EstimateCommand {
    /// Estimate the dependency length of an availability series.
    Delta {
        /// CSV with one row of comma-separated 0/1 bucket flags per day.
        #[arg(long)]
        series: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DELTA_TOLERANCE)]
        tolerance: f64,
        #[arg(long, value_enum, default_value_t = Indexing::Lag)]
        indexing: Indexing,
    },
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// Estimator and t-statistic distributions under unit and bucket sampling.
    SamplingDist {
        /// JSON object overriding configuration keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from 100 populations x 100 samples x 100 assignments.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Directory for samples.csv, summary.json and run_meta.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dependency decay in a program of exclusive experiments.
    Program {
        #[arg(long, value_parser = SETTING_NAMES)]
        setting: String,
        /// JSON object overriding configuration keys (full config for `custom`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use 50 starting points x 10000 replications.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Bucketize {
            salt,
            buckets,
            ids,
            ids_file,
        } => bucketize(&salt, buckets, ids, ids_file.as_deref())?,
        Command::Coordinate {
            config,
            seed,
            out,
            state_out,
        } => coordinate(&config, seed, out.as_deref(), state_out.as_deref())?,
        Command::Prob(ProbCommand::Overlap {
            buckets,
            frac1,
            frac2,
            margin_pp,
        }) => {
            let value = overlap_within_margin_prob(buckets, frac1, frac2, margin_pp)?;
            print_json(&json!({
                "buckets": buckets, "frac1": frac1, "frac2": frac2,
                "margin_pp": margin_pp, "value": value,
            }))?;
        }
        Command::Prob(ProbCommand::BadBuckets {
            bad,
            neutral,
            draws,
            margin,
            center,
        }) => {
            let value = bad_bucket_window_prob(bad, neutral, draws, center, margin)?;
            print_json(&json!({
                "bad": bad, "neutral": neutral, "draws": draws,
                "center": center, "margin": margin, "value": value,
            }))?;
        }
        Command::Size(SizeCommand::MinBuckets { smallest }) => {
            let value = min_buckets_for_smallest_experiment(smallest)?;
            print_json(&json!({ "smallest": smallest, "value": value }))?;
        }
        Command::Count(CountCommand::Samples {
            buckets,
            sample_buckets,
        }) => {
            if sample_buckets > buckets {
                bail!("sample_buckets ({sample_buckets}) exceeds buckets ({buckets})");
            }
            let value = num_bucket_samples(buckets, sample_buckets);
            print_json(&json!({
                "buckets": buckets, "sample_buckets": sample_buckets, "value": value.to_string(),
            }))?;
        }
        Command::Estimate(EstimateCommand::Delta {
            series,
            tolerance,
            indexing,
        }) => estimate_delta_cmd(&series, tolerance, indexing)?,
        Command::Simulate(SimulateCommand::SamplingDist {
            config,
            paper_scale,
            seed,
            threads,
            out,
        }) => with_threads(threads, || {
            sampling_dist(config.as_deref(), paper_scale, seed, out.as_deref())
        })?,
        Command::Simulate(SimulateCommand::Program {
            setting,
            config,
            paper_scale,
            seed,
            threads,
            out,
        }) => {
            if setting == "custom" && config.is_none() {
                Cli::command()
                    .error(
                        clap::error::ErrorKind::MissingRequiredArgument,
                        "--setting custom requires --config",
                    )
                    .exit();
            }
            with_threads(threads, || {
                program(&setting, config.as_deref(), paper_scale, seed, &out)
            })?
        }
        Command::Selftest { seed } => {
            let report = selftest::run(seed);
            let passed = report.iter().all(|c| c.passed);
            print_json(&json!({ "checks": report, "passed": passed }))?;
            if !passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")?
            .install(f),
    }
}

/// Pretty JSON with sorted keys (serde_json's map is ordered) and a final newline.
fn json_string(value: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn print_json(value: &Value) -> Result<()> {
    let mut stdout = io::stdout().lock();
    stdout.write_all(json_string(value)?.as_bytes())?;
    Ok(())
}

/// Write via a temporary sibling and rename, so no partial file is left behind.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_or_print(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, contents),
        None => Ok(io::stdout().lock().write_all(contents.as_bytes())?),
    }
}

/// Render a header and rows as CSV with LF line endings.
fn csv_text<R, I>(header: &[&str], rows: I) -> Result<String>
where
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
    I: IntoIterator<Item = R>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?)
}

fn bucketize(salt: &str, buckets: u32, ids: Vec<String>, ids_file: Option<&Path>) -> Result<()> {
    let ids = match ids_file {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        None if ids.is_empty() => bail!("give at least one --id or an --ids-file"),
        None => ids,
    };
    let cfg = BucketingConfig::new(buckets, Salt::from(salt))?;
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let bucket = hash_to_bucket(&UnitId::try_from(id.as_str())?, &cfg).0;
        rows.push([id, bucket.to_string()]);
    }
    write_or_print(None, &csv_text(&["id", "bucket"], rows)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CoordinateConfig {
    buckets: u32,
    days: u32,
    #[serde(default)]
    seed: u64,
    schedule: Vec<ScheduledStart>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduledStart {
    day: u32,
    id: String,
    fraction: f64,
    length: u32,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn coordinate(config: &Path, seed: Option<u64>, out: Option<&Path>, state_out: Option<&Path>) -> Result<()> {
    let cfg: CoordinateConfig = read_json(config)?;
    if cfg.days == 0 {
        bail!("days must be at least 1");
    }
    if let Some(s) = cfg.schedule.iter().find(|s| s.day == 0 || s.day > cfg.days) {
        bail!("experiment {} is scheduled on day {} outside 1..={}", s.id, s.day, cfg.days);
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(s) = cfg.schedule.iter().find(|s| !seen.insert(s.id.as_str())) {
        bail!("experiment id {} is scheduled twice", s.id);
    }
    let seed = seed.unwrap_or(cfg.seed);
    let mut rng = rng_for(seed, &[]);
    let mut state = ProgramState::new(ProgramId(0), cfg.buckets)?;
    let mut labels: std::collections::BTreeMap<u64, String> = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    for day in 1..=cfg.days {
        let stopped: Vec<String> = if day == 1 {
            Vec::new()
        } else {
            state.advance_day().iter().map(|e| labels[&e.id.0].clone()).collect()
        };
        let mut started = Vec::new();
        for s in cfg.schedule.iter().filter(|s| s.day == day) {
            let e = state
                .start_experiment(s.fraction, s.length, &mut rng)
                .with_context(|| format!("starting {} on day {day}", s.id))?;
            labels.insert(e.id.0, s.id.clone());
            started.push(s.id.clone());
        }
        rows.push([
            day.to_string(),
            state.available_count().to_string(),
            started.join(";"),
            stopped.join(";"),
        ]);
    }
    let state_json = match state_out {
        Some(_) => {
            let mut v = serde_json::to_value(state.export())?;
            let names: Map<String, Value> = labels
                .iter()
                .map(|(id, label)| (id.to_string(), Value::String(label.clone())))
                .collect();
            v.as_object_mut()
                .expect("state export is an object")
                .insert("labels".into(), Value::Object(names));
            Some(json_string(&v)?)
        }
        None => None,
    };
    if let (Some(path), Some(text)) = (state_out, state_json) {
        write_atomic(path, &text)?;
    }
    let csv = csv_text(&["day", "available_count", "started_ids", "stopped_ids"], rows)?;
    write_or_print(out, &csv)
}

fn read_series(path: &Path) -> Result<Vec<BitVector>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    reader
        .records()
        .enumerate()
        .map(|(row, record)| {
            record?
                .iter()
                .map(|cell| match cell {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(anyhow!("row {}: expected 0 or 1, found {other:?}", row + 1)),
                })
                .collect::<Result<Vec<bool>>>()
                .map(BitVector::from_bools)
        })
        .collect()
}

fn estimate_delta_cmd(series: &Path, tolerance: f64, indexing: Indexing) -> Result<()> {
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        bail!("tolerance must be a non-negative number");
    }
    let data = read_series(series)?;
    let (indexing, name) = match indexing {
        Indexing::Lag => (DeltaIndexing::Lag, "lag"),
        Indexing::Inclusive => (DeltaIndexing::Inclusive, "inclusive"),
    };
    let est = estimate_delta_with(&data, tolerance, indexing)?;
    print_json(&json!({
        "delta_hat": est.delta_hat,
        "indexing": name,
        "max_lag": est.max_lag,
        "mean_cor_by_lag": est.mean_cor_by_lag,
        "tolerance": tolerance,
    }))
}

/// Overlay the keys of a JSON object file onto a serialized base config.
fn overlay_config<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, path: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = path {
        let overrides: Value = read_json(path)?;
        let Value::Object(overrides) = overrides else {
            bail!("{} must contain a JSON object", path.display());
        };
        let target = value.as_object_mut().expect("configs serialize to objects");
        for (k, v) in overrides {
            if !target.contains_key(&k) {
                bail!("unknown configuration key {k:?} in {}", path.display());
            }
            target.insert(k, v);
        }
    }
    serde_json::from_value(value).context("invalid configuration value")
}

fn unix_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn run_meta(command: &str, config: Value, seed: u64, extra: Map<String, Value>, started: u128, clock: Instant) -> Value {
    let mut meta = Map::new();
    meta.insert("tool".into(), json!(env!("CARGO_PKG_NAME")));
    meta.insert("tool_version".into(), json!(env!("CARGO_PKG_VERSION")));
    meta.insert("command".into(), json!(command));
    meta.insert("config".into(), config);
    meta.insert("seed".into(), json!(seed));
    meta.insert("hash_function".into(), json!(HASH_FUNCTION_ID));
    meta.insert("rng".into(), json!("ChaCha8 seeded by SplitMix64 path derivation"));
    meta.insert("started_unix_ms".into(), json!(started as u64));
    meta.insert("finished_unix_ms".into(), json!(unix_millis() as u64));
    meta.insert("wall_time_seconds".into(), json!(clock.elapsed().as_secs_f64()));
    meta.extend(extra);
    Value::Object(meta)
}

fn sampling_dist(config: Option<&Path>, paper_scale: bool, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let started = unix_millis();
    let clock = Instant::now();
    let base = if paper_scale {
        SamplingSimConfig::default()
    } else {
        SamplingSimConfig::desk_scale()
    };
    let mut cfg = overlay_config(&base, config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let result = run_sampling_distribution_sim(&cfg)?;
    let summary = serde_json::to_value(result.summary())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let rows = [("unit", &result.unit), ("bucket", &result.bucket)]
            .into_iter()
            .flat_map(|(name, samples)| {
                samples.records.iter().map(move |r| {
                    [
                        name.to_string(),
                        r.population.to_string(),
                        r.sample.to_string(),
                        r.assignment.to_string(),
                        r.estimate.to_string(),
                        r.t_stat.to_string(),
                    ]
                })
            });
        let header = ["strategy", "population", "sample", "assignment", "estimate", "t_stat"];
        let csv = csv_text(&header, rows)?;
        let meta = run_meta(
            "simulate sampling-dist",
            serde_json::to_value(&cfg)?,
            cfg.seed,
            Map::new(),
            started,
            clock,
        );
        write_atomic(&dir.join("samples.csv"), &csv)?;
        write_atomic(&dir.join("summary.json"), &json_string(&summary)?)?;
        write_atomic(&dir.join("run_meta.json"), &json_string(&meta)?)?;
    }
    print_json(&summary)
}

fn program(name: &str, config: Option<&Path>, paper_scale: bool, seed: Option<u64>, out: &Path) -> Result<()> {
    let started = unix_millis();
    let clock = Instant::now();
    let mut cfg: ProgramSimConfig = if name == "custom" {
        read_json(config.expect("checked by caller"))?
    } else {
        let base = setting(name).ok_or_else(|| anyhow!("unknown setting {name}"))?;
        let base = if paper_scale { base } else { base.desk_scale() };
        overlay_config(&base, config)?
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let metrics = run_program_sim(&cfg, name)?;
    let mut extra = Map::new();
    extra.insert("setting".into(), json!(name));
    extra.insert(
        "notes".into(),
        json!({
            "bias": "ate1_bias_* compare ATE_1 with the mean day-1 effect of the buckets available for sampling on day delta; ate1_sampled_bias_mean uses the buckets actually sampled",
            "effects": "bucket effects are drawn once per starting point and shared by its replications",
            "no_start_days": "when the next drawn experiment does not fit, no further experiments start that day; the sampling vector of a day without starts is all zeros",
            "starting_point": "day-1 experiments get residual lengths when residual_start_lengths is true",
        }),
    );
    let meta = run_meta("simulate program", serde_json::to_value(&cfg)?, cfg.seed, extra, started, clock);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("metrics.csv"), &metrics.to_csv())?;
    write_atomic(&out.join("run_meta.json"), &json_string(&meta)?)?;
    Ok(())
}
