//! Four-phase supervisor over two reach-avoid controllers.
//!
//! After the loss the supervisor stays idle while the frequency is still in
//! I₁. Once it leaves I₁, C1 drives it back into I₁, C2 then drives it into
//! I₂, and inside I₂ the last commanded participation is held.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstraction::{state_to_cell, SymbolicModel};
use crate::error::{Error, Result};
use crate::grid_model::{simulate, Decision, FeedbackLaw, IntegrationMethod, StateVec, SystemMatrices};
use crate::spec_monitor::{Interval, SpecConfig};
use crate::synthesis::{
    frequency_rows_meeting, frequency_rows_within, solve_reach_avoid, Action, Controller, DeterminizationRule,
    ModelArena,
};
use crate::trace::Trace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    NoControl,
    C1,
    C2,
    FixedControl,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::NoControl => "none",
            Phase::C1 => "c1",
            Phase::C2 => "c2",
            Phase::FixedControl => "fixed",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Phase::NoControl),
            "c1" => Ok(Phase::C1),
            "c2" => Ok(Phase::C2),
            "fixed" => Ok(Phase::FixedControl),
            other => Err(Error::Format(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisorState {
    pub phase: Phase,
    /// Participation held in `FixedControl`.
    pub held_u: f64,
    /// Last commanded participation.
    pub last_u: f64,
    /// Last participation commanded by C2, if it has been active.
    pub last_c2_u: Option<f64>,
    /// Whether the frequency has left I₁ since the loss.
    pub left_i1: bool,
}

impl Default for SupervisorState {
    fn default() -> Self {
        SupervisorState {
            phase: Phase::NoControl,
            held_u: 0.0,
            last_u: 0.0,
            last_c2_u: None,
            left_i1: false,
        }
    }
}

fn lookup(c: &Controller, x: &StateVec, last_u: f64) -> Result<f64> {
    let grid = c
        .grid
        .as_ref()
        .ok_or_else(|| Error::ContractViolation(format!("controller {} has no grid", c.name)))?;
    let cell = state_to_cell(x, grid).ok_or(Error::OutsideRegion { state: x.0 })?;
    match c.action(cell) {
        None => Err(Error::NotWinning {
            cell,
            controller: c.name.clone(),
        }),
        Some(Action::Input(i)) => Ok(c.input_level(i)),
        Some(Action::Hold) => Ok(last_u),
    }
}

/// How the participation held in `FixedControl` is chosen at entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HoldRule {
    /// The last C2 command, unchanged.
    #[default]
    LastCommand,
    /// The last C2 command clamped into `[lo, hi]`.
    Clamp { lo: f64, hi: f64 },
    /// A fixed participation regardless of the last command.
    Constant { u: f64 },
}

impl HoldRule {
    fn apply(self, u: f64) -> f64 {
        match self {
            HoldRule::LastCommand => u,
            HoldRule::Clamp { lo, hi } => u.clamp(lo, hi),
            HoldRule::Constant { u } => u,
        }
    }
}

/// Participation interval whose steady-state frequency deviation lies in
/// `[f_lo, f_hi]` for every loss in `w_range`; `None` if no `u ∈ [0, 1]` does.
pub fn steady_state_band(
    matrices: &SystemMatrices,
    f_lo: f64,
    f_hi: f64,
    w_range: (f64, f64),
) -> Result<Option<(f64, f64)>> {
    let base = matrices.steady_state(0.0, 0.0)?.f();
    let per_u = matrices.steady_state(1.0, 0.0)?.f() - base;
    let per_w = matrices.steady_state(0.0, 1.0)?.f() - base;
    if !(per_u > 0.0) {
        return Ok(None);
    }
    // f*(u, w) = per_u·u + per_w·w with per_w < 0
    let (w_worst_low, w_worst_high) = if per_w <= 0.0 { (w_range.1, w_range.0) } else { (w_range.0, w_range.1) };
    let lo = ((f_lo - per_w * w_worst_low) / per_u).max(0.0);
    let hi = ((f_hi - per_w * w_worst_high) / per_u).min(1.0);
    Ok((lo <= hi).then_some((lo, hi)))
}

/// Participation that puts the steady-state deviation at the centre of
/// `[f_lo, f_hi]` under loss `w`, clamped to `[0, 1]`.
pub fn reference_participation(matrices: &SystemMatrices, f_lo: f64, f_hi: f64, w: f64) -> Result<f64> {
    let base = matrices.steady_state(0.0, w)?.f();
    let per_u = matrices.steady_state(1.0, w)?.f() - base;
    if !(per_u > 0.0) {
        return Err(Error::InvalidParameter("participation has no effect on the steady state".into()));
    }
    Ok(((0.5 * (f_lo + f_hi) - base) / per_u).clamp(0.0, 1.0))
}

/// One supervisor decision; returns the next state and the commanded participation.
pub fn supervise(
    s: SupervisorState,
    x: &StateVec,
    c1: &Controller,
    c2: &Controller,
    cfg: &SpecConfig,
    hold: HoldRule,
) -> Result<(SupervisorState, f64)> {
    let f_hz = x.f() + cfg.f_nom;
    let in_i1 = cfg.i1.contains(f_hz);
    let in_i2 = cfg.i2.contains(f_hz);
    let mut next = s;
    if !s.left_i1 && in_i1 {
        next.phase = Phase::NoControl;
        next.last_u = 0.0;
        return Ok((next, 0.0));
    }
    next.left_i1 = true;
    let u = if !in_i1 {
        next.phase = Phase::C1;
        lookup(c1, x, s.last_u)?
    } else if !in_i2 {
        next.phase = Phase::C2;
        let u = lookup(c2, x, s.last_u)?;
        next.last_c2_u = Some(u);
        u
    } else {
        if s.phase != Phase::FixedControl {
            next.held_u = hold.apply(s.last_c2_u.unwrap_or(s.last_u));
        }
        next.phase = Phase::FixedControl;
        next.held_u
    };
    next.last_u = u;
    Ok((next, u))
}

/// Multiplicative participation noise, uniform on `[-delta_max, delta_max]`.
pub fn perturb_participation(u_cmd: f64, delta_max: f64, rng: &mut impl Rng) -> f64 {
    if delta_max == 0.0 {
        return u_cmd;
    }
    let delta = rng.random_range(-delta_max..=delta_max);
    (u_cmd * (1.0 + delta)).clamp(0.0, 1.0)
}

/// Seeded participation uncertainty.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub delta_max: f64,
    rng: ChaCha8Rng,
}

impl Perturbation {
    pub fn new(delta_max: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&delta_max) {
            return Err(Error::InvalidParameter(format!(
                "delta_max must lie in [0, 1), got {delta_max}"
            )));
        }
        Ok(Perturbation {
            delta_max,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn apply(&mut self, u_cmd: f64) -> f64 {
        perturb_participation(u_cmd, self.delta_max, &mut self.rng)
    }
}

/// [`supervise`] as a feedback law, optionally with participation noise.
pub struct Supervisor<'a> {
    pub c1: &'a Controller,
    pub c2: &'a Controller,
    pub cfg: &'a SpecConfig,
    pub state: SupervisorState,
    pub hold: HoldRule,
    pub perturbation: Option<Perturbation>,
}

impl<'a> Supervisor<'a> {
    pub fn new(c1: &'a Controller, c2: &'a Controller, cfg: &'a SpecConfig) -> Self {
        Supervisor {
            c1,
            c2,
            cfg,
            state: SupervisorState::default(),
            hold: HoldRule::default(),
            perturbation: None,
        }
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Self {
        self.perturbation = Some(p);
        self
    }
}

impl FeedbackLaw for Supervisor<'_> {
    fn decide(&mut self, _t: f64, x: &StateVec) -> Result<Decision> {
        let (state, u_cmd) = supervise(self.state, x, self.c1, self.c2, self.cfg, self.hold)?;
        self.state = state;
        let u = match &mut self.perturbation {
            Some(p) if state.phase != Phase::NoControl => p.apply(u_cmd),
            _ => u_cmd,
        };
        Ok(Decision {
            u,
            phase: state.phase,
        })
    }
}

/// Input selection of the two-stage synthesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoStageOptions {
    pub rule: DeterminizationRule,
    /// When set, every ranked cell uses the rank-decreasing input closest to
    /// the participation centring the stage's band in steady state under
    /// this loss.
    pub reference_w: Option<f64>,
}

impl TwoStageOptions {
    pub fn plain(rule: DeterminizationRule) -> Self {
        TwoStageOptions { rule, reference_w: None }
    }
}

/// Reach-avoid controller for one stage: reaches the cells whose frequency
/// row lies inside `band` and avoids every cell that meets the region below
/// the containment limit.
pub fn synthesize_stage(
    model: &SymbolicModel,
    matrices: &SystemMatrices,
    cfg: &SpecConfig,
    band: Interval,
    name: &str,
    opts: TwoStageOptions,
) -> Result<Controller> {
    let arena = ModelArena::new(model)?;
    let g = &model.grid;
    let avoid = frequency_rows_meeting(g, f64::NEG_INFINITY, cfg.c_zone - cfg.f_nom);
    let target = frequency_rows_within(g, band.lo - cfg.f_nom, band.hi - cfg.f_nom);
    if target.is_empty() {
        return Err(Error::Config(format!(
            "no cell of the abstraction lies inside the {name} target band"
        )));
    }
    let mut c = solve_reach_avoid(&arena, &target, &avoid, opts.rule)?.bind(model, name);
    if let Some(w) = opts.reference_w {
        let u = reference_participation(matrices, band.lo - cfg.f_nom, band.hi - cfg.f_nom, w)?;
        c.prefer_level(&arena, u)?;
    }
    Ok(c)
}

/// C1 (target I₁) and C2 (target I₂) via [`synthesize_stage`].
pub fn synthesize_two_stage(
    model: &SymbolicModel,
    matrices: &SystemMatrices,
    cfg: &SpecConfig,
    opts: TwoStageOptions,
) -> Result<(Controller, Controller)> {
    cfg.validate()?;
    Ok((
        synthesize_stage(model, matrices, cfg, cfg.i1, "c1", opts)?,
        synthesize_stage(model, matrices, cfg, cfg.i2, "c2", opts)?,
    ))
}

/// Post-loss closed-loop scenario for the supervised controller.
#[derive(Clone, Debug)]
pub struct ClosedLoopScenario {
    pub x0: StateVec,
    /// Hz-scaled loss held from `t = 0`.
    pub w: f64,
    pub horizon: f64,
    pub tau: f64,
    pub hold: HoldRule,
}

pub fn run_supervised(
    matrices: &SystemMatrices,
    c1: &Controller,
    c2: &Controller,
    cfg: &SpecConfig,
    scenario: &ClosedLoopScenario,
    perturbation: Option<Perturbation>,
) -> Result<Trace> {
    let mut sup = Supervisor::new(c1, c2, cfg);
    sup.hold = scenario.hold;
    sup.perturbation = perturbation;
    let w = scenario.w;
    simulate(
        matrices,
        cfg.f_nom,
        scenario.x0,
        &mut sup,
        |_| w,
        scenario.horizon,
        scenario.tau,
        IntegrationMethod::Exact,
    )
}

/// Whether the phase sequence only moves along NoControl → C1 → C2 → Fixed,
/// apart from the regressions C2 → C1 and Fixed → C2.  Returns the number of
/// regressions, or `None` on a forbidden transition.
pub fn phase_regressions(trace: &Trace) -> Option<usize> {
    let mut regressions = 0;
    for pair in trace.samples.windows(2) {
        use Phase::*;
        match (pair[0].phase, pair[1].phase) {
            (a, b) if a == b => {}
            (NoControl, C1) | (C1, C2) | (C2, FixedControl) | (C1, FixedControl) => {}
            (C2, C1) | (FixedControl, C2) => regressions += 1,
            _ => return None,
        }
    }
    Some(regressions)
}
