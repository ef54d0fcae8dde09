//! Fixtures shared by the criterion benchmarks.

use freqsynth::config::{Experiment, PerDim, ScenarioConfig, CI_ETA};
use freqsynth::ChargingMode;

/// Coarse bidirectional experiment that builds in about a second.
pub fn coarse_experiment() -> Experiment {
    let mut raw = ScenarioConfig::for_mode(ChargingMode::Bi);
    raw.abstraction.eta = Some(PerDim::Vector(CI_ETA));
    raw.resolve().expect("coarse configuration resolves")
}
