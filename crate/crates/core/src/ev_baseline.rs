//! Reference droop controller for the EV aggregate: deadband, droop gain,
//! first-order lag and a `[0, 1]` saturation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid_model::{
    build_matrices, simulate, ChargingMode, Decision, FeedbackLaw, GridParams, IntegrationMethod,
    StateVec,
};
use crate::multiphase::Phase;
use crate::trace::Trace;

/// Shifted deadband: zero inside `±half_width`, offset by the half-width outside.
pub fn deadband(df_hz: f64, half_width: f64) -> f64 {
    if df_hz.abs() <= half_width {
        0.0
    } else {
        df_hz - df_hz.signum() * half_width
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaselineState {
    /// Output of the `1/(s T_ev + D)` block, in participation units.
    pub lag: f64,
}

/// Advances the lag over `dt` with the deadbanded droop input held constant
/// and returns the saturated participation.
pub fn baseline_step(
    s: BaselineState,
    df_hz: f64,
    params: &GridParams,
    dt: f64,
) -> (BaselineState, f64) {
    let input = -deadband(df_hz, params.deadband_hz) / params.r_ev;
    let rate = params.d / params.t_ev;
    let steady = input / params.d;
    let lag = steady + (s.lag - steady) * (-rate * dt).exp();
    (BaselineState { lag }, lag.clamp(0.0, 1.0))
}

/// [`baseline_step`] wrapped as a sampled feedback law with period `dt`.
#[derive(Clone, Debug)]
pub struct BaselineController {
    pub params: GridParams,
    pub dt: f64,
    pub state: BaselineState,
}

impl BaselineController {
    pub fn new(params: GridParams, dt: f64) -> Self {
        BaselineController {
            params,
            dt,
            state: BaselineState::default(),
        }
    }
}

impl FeedbackLaw for BaselineController {
    fn decide(&mut self, _t: f64, x: &StateVec) -> Result<Decision> {
        let (state, u) = baseline_step(self.state, x.f(), &self.params, self.dt);
        self.state = state;
        Ok(Decision {
            u,
            phase: Phase::NoControl,
        })
    }
}

/// Step-loss scenario for baseline runs.
#[derive(Clone, Debug)]
pub struct BaselineScenario {
    pub params: GridParams,
    /// Hz-scaled loss applied from `t = 0`.
    pub w: f64,
    pub horizon: f64,
    pub tau: f64,
}

impl BaselineScenario {
    pub fn gb(mode: ChargingMode, w: f64) -> Self {
        BaselineScenario {
            params: GridParams::gb(mode),
            w,
            horizon: 200.0,
            tau: 0.01,
        }
    }
}

/// Closed-loop run of the baseline controller from rest.
pub fn run_baseline(scenario: &BaselineScenario) -> Result<Trace> {
    let matrices = build_matrices(&scenario.params)?;
    let mut law = BaselineController::new(scenario.params.clone(), scenario.tau);
    let w = scenario.w;
    simulate(
        &matrices,
        scenario.params.f_nom,
        StateVec::ZERO,
        &mut law,
        |_| w,
        scenario.horizon,
        scenario.tau,
        IntegrationMethod::Exact,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub half_width_hz: f64,
    pub mode: ChargingMode,
    pub steady_f_hz: f64,
    pub settled: bool,
}

pub const SETTLE_WINDOW_S: f64 = 10.0;
pub const SETTLE_PEAK_TO_PEAK_HZ: f64 = 1e-4;

/// Default deadband half-widths `{0, 0.05, …, 0.35}`.
pub fn default_half_widths() -> Vec<f64> {
    (0..=7).map(|k| k as f64 * 0.05).collect()
}

/// Final-window settling check and steady value of a trace.
pub fn settled_value(trace: &Trace) -> (f64, bool) {
    let last = trace.final_f_hz().unwrap_or(trace.f_nom);
    let t_end = trace.samples.last().map_or(0.0, |s| s.t);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..trace.len() {
        if trace.samples[k].t >= t_end - SETTLE_WINDOW_S {
            let f = trace.f_hz(k);
            lo = lo.min(f);
            hi = hi.max(f);
        }
    }
    (last, hi - lo <= SETTLE_PEAK_TO_PEAK_HZ)
}

pub fn sweep_deadband(
    half_widths: &[f64],
    mode: ChargingMode,
    scenario: &BaselineScenario,
) -> Result<Vec<SweepRow>> {
    half_widths
        .iter()
        .map(|&hw| {
            let mut sc = scenario.clone();
            sc.params.deadband_hz = hw;
            let trace = run_baseline(&sc)?;
            let (steady_f_hz, settled) = settled_value(&trace);
            Ok(SweepRow {
                half_width_hz: hw,
                mode,
                steady_f_hz,
                settled,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "half_width_hz,mode,steady_f_hz,settled";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.half_width_hz, r.mode, r.steady_f_hz, r.settled
        ));
    }
    out
}
