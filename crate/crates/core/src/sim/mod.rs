//! Deterministic contention simulator.
//!
//! The model has one private L1 per CPU, a shared set-associative LLC that
//! indexes physical addresses (coloring is enforced only through page
//! allocation), a FIFO memory bus and optional per-CPU budget/period
//! bandwidth regulation. CPUs are blocking: each has at most one
//! outstanding access. Events are processed in (cycle, cpu_id) order.

mod cache;
mod machine;
mod memory;
mod stream;

use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{Cache, Evicted, Lookup};
pub use machine::{BenchCounters, Counters, SimOutcome, TxnRecord};
pub use memory::{FrameAllocator, GuestMemory, MemError, allocate_guest_memory, color_of};
pub use stream::{Access, ContentionStream, VictimStream, contention_stream};

use crate::config::PlatformSpec;
use crate::genspace::Setup;
use crate::metrics::{Decimal3, Metric, MetricsSample};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arbitration {
    #[default]
    FifoCpuIndexTiebreak,
}

pub const DEFAULT_MAX_CYCLES: u64 = 10_000_000_000;
const DEFAULT_PHYS_MEM: u64 = 4 << 30;

fn default_max_cycles() -> u64 {
    DEFAULT_MAX_CYCLES
}

fn default_phys_mem() -> u64 {
    DEFAULT_PHYS_MEM
}

fn default_true() -> bool {
    true
}

/// Timing model and run options (`simparams.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub l1_hit_cycles: u64,
    pub l2_hit_cycles: u64,
    /// Bus occupancy of one memory transaction.
    pub bus_service_cycles: u64,
    /// Dirty evictions cost one extra bus transaction.
    #[serde(default = "default_true")]
    pub writeback_extra_transaction: bool,
    #[serde(default)]
    pub arbitration: Arbitration,
    /// A victim still running past this cycle is reported as a timeout.
    #[serde(default = "default_max_cycles")]
    pub max_cycles: u64,
    /// Give every contention-engine CPU its own buffer instead of sharing one.
    #[serde(default)]
    pub engine_private_buffers: bool,
    #[serde(default = "default_phys_mem")]
    pub phys_mem_bytes: u64,
    /// When set, each repetition shuffles page placement with seed
    /// `placement_seed + iteration` and is simulated separately.
    #[serde(default)]
    pub placement_seed: Option<u64>,
    /// Verify cache structure after every LLC access (slow).
    #[serde(default)]
    pub check_invariants: bool,
    /// Keep a per-transaction bus trace in the outcome.
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            l1_hit_cycles: 1,
            l2_hit_cycles: 10,
            bus_service_cycles: 20,
            writeback_extra_transaction: true,
            arbitration: Arbitration::FifoCpuIndexTiebreak,
            max_cycles: DEFAULT_MAX_CYCLES,
            engine_private_buffers: false,
            phys_mem_bytes: DEFAULT_PHYS_MEM,
            placement_seed: None,
            check_invariants: false,
            record_trace: false,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.l2_hit_cycles == 0 || self.bus_service_cycles == 0 {
            return Err(SimError::InvalidSetup(
                "l2_hit_cycles and bus_service_cycles must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("setup `{setup}`: victim did not finish within {cycles} cycles")]
    Timeout { setup: String, cycles: u64 },
    #[error("setup `{setup}`: simulation cancelled")]
    Cancelled { setup: String },
    #[error("setup `{setup}`, guest `{guest}`: {source}")]
    Memory {
        setup: String,
        guest: String,
        #[source]
        source: MemError,
    },
    #[error("invalid setup: {0}")]
    InvalidSetup(String),
    #[error("cache invariant violated: {0}")]
    Invariant(String),
}

/// Converts a cycle count to milliseconds at `clock_hz`, rounded to the
/// nearest microsecond.
pub fn cycles_to_ms(cycles: u64, clock_hz: u64) -> Decimal3 {
    let micros = (u128::from(cycles) * 1_000_000 + u128::from(clock_hz) / 2) / u128::from(clock_hz.max(1));
    Decimal3::from_milli(micros.min(u128::from(u64::MAX)) as u64)
}

/// Runs one simulation of `setup`. `placement_seed` shuffles page placement.
pub fn simulate_once(
    setup: &Setup,
    plat: &PlatformSpec,
    params: &SimParams,
    placement_seed: Option<u64>,
    cancel: Option<&AtomicBool>,
) -> Result<SimOutcome, SimError> {
    params.validate()?;
    machine::Machine::build(setup, plat, params, placement_seed)?.run(cancel)
}

fn samples_from(outcome: &SimOutcome, clock_hz: u64, iteration: u32) -> Vec<MetricsSample> {
    outcome
        .benches
        .iter()
        .map(|b| {
            let mut s = MetricsSample::new(&b.vm, &b.bench, iteration);
            s.set(Metric::TimeMs, cycles_to_ms(b.end_cycle - b.start_cycle, clock_hz));
            s.set(Metric::LlcMiss, Decimal3::from_int(b.counters.llc_miss));
            s.set(Metric::BusCycles, Decimal3::from_int(b.counters.bus_cycles));
            s.set(Metric::MemAccess, Decimal3::from_int(b.counters.mem_access));
            s.set(Metric::RetiredOps, Decimal3::from_int(b.counters.retired));
            s
        })
        .collect()
}

/// Metric samples for every victim benchmark, `repetitions` iterations
/// each. Without a placement seed the model is deterministic, so one run
/// provides every iteration.
pub fn simulate(
    setup: &Setup,
    plat: &PlatformSpec,
    params: &SimParams,
    repetitions: u32,
) -> Result<Vec<MetricsSample>, SimError> {
    simulate_cancellable(setup, plat, params, repetitions, None)
}

pub fn simulate_cancellable(
    setup: &Setup,
    plat: &PlatformSpec,
    params: &SimParams,
    repetitions: u32,
    cancel: Option<&AtomicBool>,
) -> Result<Vec<MetricsSample>, SimError> {
    let mut samples = Vec::new();
    match params.placement_seed {
        None => {
            let outcome = simulate_once(setup, plat, params, None, cancel)?;
            for it in 0..repetitions {
                samples.extend(samples_from(&outcome, plat.clock_hz, it));
            }
        }
        Some(seed) => {
            for it in 0..repetitions {
                let outcome = simulate_once(setup, plat, params, Some(seed.wrapping_add(u64::from(it))), cancel)?;
                samples.extend(samples_from(&outcome, plat.clock_hz, it));
            }
        }
    }
    // Group by (vm, bench) so each stream's iterations are contiguous.
    samples.sort_by(|a, b| (&a.vm, &a.bench, a.iteration).cmp(&(&b.vm, &b.bench, b.iteration)));
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ms_conversion() {
        assert_eq!(cycles_to_ms(1_200_000, 1_200_000_000), Decimal3::from_int(1));
        assert_eq!(cycles_to_ms(5_244_000, 1_200_000_000).to_string(), "4.37");
        assert_eq!(cycles_to_ms(0, 1), Decimal3::ZERO);
    }

    #[test]
    fn params_json_defaults() {
        let p: SimParams =
            serde_json::from_str(r#"{"l1_hit_cycles": 1, "l2_hit_cycles": 10, "bus_service_cycles": 20}"#).unwrap();
        assert_eq!(p, SimParams::default());
    }
}
