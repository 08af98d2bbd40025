//! Distribution system state estimation with time-varying measurement
//! weights under asynchronous SCADA/μPMU arrivals.
//!
//! The crate simulates a radial distribution feeder whose loads drift as
//! Ornstein–Uhlenbeck processes, schedules staggered SCADA group arrivals
//! against a fast μPMU clock, and runs a two-step weighted-least-squares
//! state estimator with projection-based gross-error analytics. The point of
//! the exercise: comparing classical magnitude-proportional measurement
//! weights against weights that grow with each stale measurement's age, and
//! measuring the false-positive rate of the chi-squared gross-error test and
//! the cumulative voltage estimation error under both schemes.
//!
//! Module map:
//! - [`grid`] — case parsing, Y-bus, Newton–Raphson power flow (ground truth)
//! - [`measurement`] — measurement functions h(x), Jacobian rows, plans
//! - [`ou`] — OU load dynamics and staleness variance
//! - [`estimator`] — WLS solver, projection statistics, two-step procedure
//! - [`schedule`] — staggered arrival timeline and sample buffers
//! - [`runner`] — scenario orchestration, metrics, CSV emission
//! - [`config`] — run configuration and reproducibility manifests
//! - [`stats`] — chi-squared threshold machinery

pub mod config;
pub mod error;
pub mod estimator;
pub mod grid;
pub mod measurement;
pub mod ou;
pub mod runner;
pub mod schedule;
pub mod stats;

pub use error::{Error, Result};
