//! Bucket reuse for online experiments: salted hash bucketing, coordination of
//! exclusive experiment programs, hypergeometric design calculations,
//! estimators and Monte Carlo studies of carry-over correlation.

pub mod bits;
pub mod bucketing;
pub mod coordination;
pub mod probability;
pub mod rng;
pub mod estimation;
pub mod simulation;
