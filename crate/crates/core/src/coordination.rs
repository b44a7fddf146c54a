//! Discrete-time state of programs of exclusive experiments.
//!
//! A [`ProgramState`] tracks which buckets are occupied by running experiments
//! on each day. New exclusive experiments draw their buckets uniformly without
//! replacement from the currently available pool; non-exclusive experiments
//! draw from all buckets and never touch availability. Within a day, all stops
//! happen (in [`ProgramState::advance_day`]) before any start.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::{AvailabilityVector, BitVector, SamplingVector};
use crate::bucketing::BucketId;
use crate::probability::round_half_up;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoordinationError {
    #[error("experiment fraction {0} must lie in (0, 1]")]
    InvalidFraction(f64),
    #[error("fraction {fraction} of {buckets} buckets rounds to zero buckets")]
    FractionTooSmall { fraction: f64, buckets: u32 },
    #[error("experiment needs {required} buckets but only {available} are available")]
    InsufficientBuckets { required: usize, available: usize },
    #[error("experiment length must be at least one day")]
    ZeroLength,
    #[error("number of buckets must be at least 1")]
    NoBuckets,
    #[error("invalid exported state: {0}")]
    InvalidExport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperimentId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProgramId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: ExperimentId,
    pub program: ProgramId,
    pub size_fraction: f64,
    pub length_days: u32,
    pub start_day: u32,
    pub buckets: Vec<BucketId>,
}

impl Experiment {
    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    /// Last day on which the experiment holds its buckets.
    pub fn end_day(&self) -> u32 {
        self.start_day + self.length_days - 1
    }
}

/// Number of buckets an experiment of relative size `fraction` receives:
/// `fraction * B` rounded half-up.
pub fn buckets_for_fraction(fraction: f64, num_buckets: u32) -> Result<usize, CoordinationError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoordinationError::InvalidFraction(fraction));
    }
    match round_half_up(fraction, u64::from(num_buckets)) {
        0 => Err(CoordinationError::FractionTooSmall {
            fraction,
            buckets: num_buckets,
        }),
        k => Ok(k as usize),
    }
}

/// Uniform without-replacement draw from all `num_buckets` buckets, returned
/// in increasing order.
pub fn sample_nonexclusive<R: Rng + ?Sized>(
    num_buckets: u32,
    size_fraction: f64,
    rng: &mut R,
) -> Result<Vec<BucketId>, CoordinationError> {
    let k = buckets_for_fraction(size_fraction, num_buckets)?;
    let mut picked: Vec<BucketId> = rand::seq::index::sample(rng, num_buckets as usize, k)
        .into_iter()
        .map(|i| BucketId(i as u32))
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

const NOT_AVAILABLE: u32 = u32::MAX;

/// One program of exclusive experiments.
#[derive(Debug, Clone)]
pub struct ProgramState {
    program: ProgramId,
    clock: u32,
    num_buckets: u32,
    active: Vec<Experiment>,
    availability: AvailabilityVector,
    sampled_today: SamplingVector,
    // Free buckets in draw order; `position[b]` is b's slot or NOT_AVAILABLE.
    free: Vec<u32>,
    position: Vec<u32>,
    next_id: u64,
}

impl ProgramState {
    /// Fresh program on day 1 with every bucket available.
    pub fn new(program: ProgramId, num_buckets: u32) -> Result<Self, CoordinationError> {
        if num_buckets == 0 {
            return Err(CoordinationError::NoBuckets);
        }
        Ok(Self {
            program,
            clock: 1,
            num_buckets,
            active: Vec::new(),
            availability: BitVector::ones(num_buckets as usize),
            sampled_today: BitVector::zeros(num_buckets as usize),
            free: (0..num_buckets).collect(),
            position: (0..num_buckets).collect(),
            next_id: 1,
        })
    }

    pub fn program(&self) -> ProgramId {
        self.program
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn num_buckets(&self) -> u32 {
        self.num_buckets
    }

    pub fn active(&self) -> &[Experiment] {
        &self.active
    }

    pub fn available_count(&self) -> usize {
        self.free.len()
    }

    pub fn occupied_count(&self) -> usize {
        self.num_buckets as usize - self.free.len()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.num_buckets as f64
    }

    pub fn availability(&self) -> &AvailabilityVector {
        &self.availability
    }

    /// Buckets sampled by experiments started on the current day.
    pub fn sampled_today(&self) -> &SamplingVector {
        &self.sampled_today
    }

    /// Free buckets, in the internal draw order.
    pub fn free_buckets(&self) -> impl Iterator<Item = BucketId> + '_ {
        self.free.iter().map(|&b| BucketId(b))
    }

    /// Copy of the day's availability and sampling vectors.
    pub fn snapshot(&self) -> (AvailabilityVector, SamplingVector) {
        (self.availability.clone(), self.sampled_today.clone())
    }

    /// Start an experiment on the current day, drawing its buckets uniformly
    /// without replacement from the available pool.
    pub fn start_experiment<R: Rng + ?Sized>(
        &mut self,
        size_fraction: f64,
        length_days: u32,
        rng: &mut R,
    ) -> Result<&Experiment, CoordinationError> {
        if length_days == 0 {
            return Err(CoordinationError::ZeroLength);
        }
        let required = buckets_for_fraction(size_fraction, self.num_buckets)?;
        if required > self.free.len() {
            return Err(CoordinationError::InsufficientBuckets {
                required,
                available: self.free.len(),
            });
        }
        let mut buckets = Vec::with_capacity(required);
        for _ in 0..required {
            let slot = rng.random_range(0..self.free.len());
            let bucket = self.take_free_slot(slot);
            self.availability.set(bucket as usize, false);
            self.sampled_today.set(bucket as usize, true);
            buckets.push(BucketId(bucket));
        }
        let id = ExperimentId(self.next_id);
        self.next_id += 1;
        self.active.push(Experiment {
            id,
            program: self.program,
            size_fraction,
            length_days,
            start_day: self.clock,
            buckets,
        });
        Ok(self.active.last().expect("just pushed"))
    }

    /// Move to the next day, stopping every experiment whose last day has
    /// passed and returning their buckets to the pool. Stopped experiments
    /// come back in start order.
    pub fn advance_day(&mut self) -> Vec<Experiment> {
        self.clock += 1;
        self.sampled_today.fill(false);
        let clock = self.clock;
        let (stopped, running): (Vec<_>, Vec<_>) = std::mem::take(&mut self.active)
            .into_iter()
            .partition(|e| e.end_day() < clock);
        self.active = running;
        for experiment in &stopped {
            for &bucket in &experiment.buckets {
                self.release(bucket.0);
            }
        }
        stopped
    }

    fn take_free_slot(&mut self, slot: usize) -> u32 {
        let bucket = self.free.swap_remove(slot);
        if let Some(&moved) = self.free.get(slot) {
            self.position[moved as usize] = slot as u32;
        }
        self.position[bucket as usize] = NOT_AVAILABLE;
        bucket
    }

    fn release(&mut self, bucket: u32) {
        debug_assert_eq!(self.position[bucket as usize], NOT_AVAILABLE);
        self.position[bucket as usize] = self.free.len() as u32;
        self.free.push(bucket);
        self.availability.set(bucket as usize, true);
    }

    pub fn export(&self) -> ProgramStateExport {
        ProgramStateExport {
            clock: self.clock,
            buckets: self.num_buckets,
            experiments: self
                .active
                .iter()
                .map(|e| ExportedExperiment {
                    id: e.id,
                    start_day: e.start_day,
                    length_days: e.length_days,
                    size_fraction: e.size_fraction,
                    buckets: e.buckets.clone(),
                })
                .collect(),
            availability: self.availability.to_rle(),
        }
    }

    /// Rebuild a program from an export. The day's sampling vector is
    /// recovered from experiments whose start day equals the clock.
    pub fn from_export(
        program: ProgramId,
        export: &ProgramStateExport,
    ) -> Result<Self, CoordinationError> {
        let bad = |msg: String| CoordinationError::InvalidExport(msg);
        let mut state = Self::new(program, export.buckets)?;
        state.clock = export.clock;
        for e in &export.experiments {
            if e.length_days == 0 {
                return Err(bad(format!("experiment {} has zero length", e.id.0)));
            }
            for &bucket in &e.buckets {
                if bucket.0 >= export.buckets {
                    return Err(bad(format!("bucket {} out of range", bucket.0)));
                }
                let slot = state.position[bucket.index()];
                if slot == NOT_AVAILABLE {
                    return Err(bad(format!("bucket {} held twice", bucket.0)));
                }
                state.take_free_slot(slot as usize);
                state.availability.set(bucket.index(), false);
                if e.start_day == export.clock {
                    state.sampled_today.set(bucket.index(), true);
                }
            }
            state.next_id = state.next_id.max(e.id.0 + 1);
            state.active.push(Experiment {
                id: e.id,
                program,
                size_fraction: e.size_fraction,
                length_days: e.length_days,
                start_day: e.start_day,
                buckets: e.buckets.clone(),
            });
        }
        let declared =
            BitVector::from_rle(&export.availability).map_err(|err| bad(err.to_string()))?;
        if declared != state.availability {
            return Err(bad("availability does not match running experiments".into()));
        }
        Ok(state)
    }
}

/// JSON form of a program's state. `availability` is the run-length encoded
/// bit string (`bit:count` runs from bucket 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramStateExport {
    pub clock: u32,
    #[serde(rename = "B")]
    pub buckets: u32,
    pub experiments: Vec<ExportedExperiment>,
    pub availability: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedExperiment {
    pub id: ExperimentId,
    pub start_day: u32,
    pub length_days: u32,
    pub size_fraction: f64,
    pub buckets: Vec<BucketId>,
}
