//! Inputs shared by the benchmarks: the reproduction fixture and a few
//! smaller setups that run in milliseconds.

use partlab_core::config::{parse_experiment, parse_platform};
use partlab_core::genspace::enumerate_setups;
use partlab_core::{ExperimentSpec, Manifest, PlatformSpec, Setup};

const PLATFORM: &str = include_str!("../../../fixtures/repro/platform.json");
const EXPERIMENT: &str = include_str!("../../../fixtures/repro/experiment.json");

pub fn platform() -> PlatformSpec {
    parse_platform(PLATFORM).expect("fixture platform parses")
}

pub fn experiment() -> ExperimentSpec {
    parse_experiment(EXPERIMENT, &platform()).expect("fixture experiment parses")
}

pub fn manifest() -> Manifest {
    enumerate_setups(&experiment(), &platform()).expect("fixture enumerates")
}

/// The fixture setup named `name`, with every victim bench cut to
/// `accesses` accesses so one simulation stays short.
pub fn shortened(name: &str, accesses: u64) -> Setup {
    let mut setup = manifest()
        .setups
        .into_iter()
        .find(|s| s.name == name)
        .unwrap_or_else(|| panic!("fixture has no setup `{name}`"));
    for g in &mut setup.guests {
        if let partlab_core::SetupWorkload::Victim { presets } = &mut g.workload {
            for p in presets {
                p.total_accesses = p.total_accesses.min(accesses);
            }
        }
    }
    setup
}
