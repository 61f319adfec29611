//! Interference-analysis toolkit for statically partitioned multi-core
//! platforms.
//!
//! The crate is organized around the life of an experiment:
//!
//! - [`config`] parses and validates platform and experiment documents.
//! - [`genspace`] enumerates contention-engine variants, cache-coloring
//!   assignments and bandwidth-regulation assignments into named setups.
//! - [`sim`] is a deterministic contention simulator (private L1s, shared
//!   colored LLC, FIFO memory bus, budget/period regulation).
//! - [`logmon`] defines the metric line protocol and groups metric events
//!   into samples.
//! - [`orchestrator`] drives backends over a manifest and persists run
//!   records.
//! - [`report`] turns run records into baseline-relative slowdowns.

pub mod config;
pub mod genspace;
pub mod logmon;
pub mod metrics;
pub mod orchestrator;
pub mod report;
pub mod sim;

pub use config::{
    BackendKind, CacheGeom, ColoringSpec, ContentionSweep, ExperimentSpec, GuestKind, GuestSpec,
    MbrMode, MbrSpec, OpType, PlatformSpec, VictimPreset, Workload,
};
pub use genspace::{
    ColoringAssignment, ContentionConfig, Manifest, MbrAssignment, Setup, SetupGuest,
    SetupWorkload,
};
pub use metrics::{Decimal3, Metric, MetricsSample};
pub use sim::{SimParams, simulate};
