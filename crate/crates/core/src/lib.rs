//! Orchestration of longitudinal daily-task studies run on a crowd
//! platform: enrollment with verification codes, per-measurement bonus
//! payments, reminder scheduling, an append-only event log, retention
//! analytics and a seeded behavioral simulator.
//!
//! Statistics are generic over [`scalar::Scalar`]; the aliases below fix the
//! common choices.

pub mod analytics;
pub mod clock;
pub mod config_file;
pub mod domain;
pub mod gateway;
pub mod payment;
pub mod persistence;
pub mod scalar;
pub mod service;
pub mod sim;
pub mod state;
pub mod stats;

/// Test result in double precision, as used by the reports.
pub type TestOutcome64 = stats::TestOutcome<f64>;
/// Test result in single precision.
pub type TestOutcome32 = stats::TestOutcome<f32>;
/// Exact dollars-per-hour value before rounding.
pub type HourlyExact = num_rational::Ratio<i64>;
