//! Linear load-frequency model of the GB grid with an aggregated EV fleet.
//!
//! The state is the deviation vector `[f, g, l, p]` (frequency, governor,
//! lead-lag, turbine power), uniformly scaled by the nominal frequency so
//! that `f` reads directly as a Hz deviation from 50 Hz. The participation
//! `u ∈ [0, 1]` enters through `B`, the infeed loss `w` through `Bw`.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use nalgebra::{Matrix4, SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiphase::Phase;
use crate::trace::{Sample, Trace};

pub const F: usize = 0;
pub const G: usize = 1;
pub const L: usize = 2;
pub const P: usize = 3;

/// Default post-event loss, Hz-scaled.
pub const NOMINAL_LOSS_W: f64 = 4.8;
/// Loss in MW that corresponds to [`NOMINAL_LOSS_W`].
pub const NOMINAL_LOSS_MW: f64 = 2000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChargingMode {
    /// Unidirectional chargers: EVs can only curtail charging.
    Uni,
    /// Bidirectional (V2G) chargers: twice the per-vehicle response power.
    Bi,
}

impl ChargingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ChargingMode::Uni => "uni",
            ChargingMode::Bi => "bi",
        }
    }
}

impl std::fmt::Display for ChargingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChargingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(ChargingMode::Uni),
            "bi" => Ok(ChargingMode::Bi),
            other => Err(Error::Config(format!("unknown charging mode `{other}`"))),
        }
    }
}

/// Physical and EV-aggregation constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    /// Governor droop gain `1/R_eq` (negative: frequency deficit raises output).
    pub r_eq_inv: f64,
    pub t_g: f64,
    pub t_t: f64,
    pub t_1: f64,
    pub t_2: f64,
    /// Load damping.
    pub d: f64,
    /// Inertia constant in seconds.
    pub h: f64,
    /// Hz-scaled power injected by the whole fleet at full participation.
    pub k_ev: f64,
    pub f_nom: f64,
    pub t_ev: f64,
    pub r_ev: f64,
    /// Half-width of the EV deadband in Hz.
    pub deadband_hz: f64,
    /// Per-vehicle power; metadata only.
    pub p_av: f64,
    /// Fleet size; metadata only.
    pub n_ev: u32,
    /// System base power in MW used to convert MW losses into Hz-scaled units.
    pub s_base: f64,
}

impl GridParams {
    /// GB defaults for the given charging mode.
    pub fn gb(mode: ChargingMode) -> Self {
        let (k_ev, p_av) = match mode {
            ChargingMode::Uni => (3.6, 0.028),
            ChargingMode::Bi => (7.2, 0.056),
        };
        GridParams {
            r_eq_inv: -5.0,
            t_g: 2.5,
            t_t: 0.5,
            t_1: 2.0,
            t_2: 12.0,
            d: 1.0,
            h: 4.0,
            k_ev,
            f_nom: 50.0,
            t_ev: 0.035,
            r_ev: 0.5,
            deadband_hz: 0.15,
            p_av,
            n_ev: 25_000,
            s_base: NOMINAL_LOSS_MW * 50.0 / NOMINAL_LOSS_W,
        }
    }

    /// Same grid with the EV fleet disconnected.
    pub fn without_evs(mut self) -> Self {
        self.k_ev = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_g", self.t_g),
            ("t_t", self.t_t),
            ("t_1", self.t_1),
            ("t_2", self.t_2),
            ("t_ev", self.t_ev),
            ("h", self.h),
            ("d", self.d),
            ("f_nom", self.f_nom),
            ("s_base", self.s_base),
            ("r_ev", self.r_ev),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.deadband_hz >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "deadband_hz must be non-negative, got {}",
                self.deadband_hz
            )));
        }
        if !(self.k_ev >= 0.0) || !self.k_ev.is_finite() {
            return Err(Error::InvalidParameter(format!("k_ev must be non-negative, got {}", self.k_ev)));
        }
        if !self.r_eq_inv.is_finite() {
            return Err(Error::InvalidParameter("r_eq_inv must be finite".into()));
        }
        Ok(())
    }

    /// Converts an infeed loss in MW to the Hz-scaled disturbance `w`.
    pub fn loss_mw_to_w(&self, loss_mw: f64) -> f64 {
        loss_mw / self.s_base * self.f_nom
    }

    pub fn w_to_loss_mw(&self, w: f64) -> f64 {
        w * self.s_base / self.f_nom
    }
}

/// Deviation state `[f, g, l, p]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateVec(pub [f64; 4]);

impl StateVec {
    pub const ZERO: StateVec = StateVec([0.0; 4]);

    pub fn new(f: f64, g: f64, l: f64, p: f64) -> Self {
        StateVec([f, g, l, p])
    }

    pub fn f(&self) -> f64 {
        self.0[F]
    }
    pub fn g(&self) -> f64 {
        self.0[G]
    }
    pub fn l(&self) -> f64 {
        self.0[L]
    }
    pub fn p(&self) -> f64 {
        self.0[P]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::from(self.0)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        StateVec([v[0], v[1], v[2], v[3]])
    }
}

impl Index<usize> for StateVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for StateVec {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for StateVec {
    type Output = StateVec;
    fn add(self, rhs: StateVec) -> StateVec {
        StateVec(std::array::from_fn(|i| self.0[i] + rhs.0[i]))
    }
}

impl Sub for StateVec {
    type Output = StateVec;
    fn sub(self, rhs: StateVec) -> StateVec {
        StateVec(std::array::from_fn(|i| self.0[i] - rhs.0[i]))
    }
}

impl Mul<f64> for StateVec {
    type Output = StateVec;
    fn mul(self, k: f64) -> StateVec {
        StateVec(self.0.map(|v| v * k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMethod {
    /// Zero-order-hold discretization through the matrix exponential.
    Exact,
    /// Fixed-step classical Runge-Kutta.
    Rk4,
}

/// `ẋ = A x + B u + Bw w`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrices {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub bw: Vector4<f64>,
}

pub fn build_matrices(params: &GridParams) -> Result<SystemMatrices> {
    params.validate()?;
    let GridParams {
        r_eq_inv,
        t_g,
        t_t,
        t_1,
        t_2,
        d,
        h,
        k_ev,
        ..
    } = *params;

    let mut a = Matrix4::zeros();
    a[(F, F)] = -d / (2.0 * h);
    a[(F, P)] = 1.0 / (2.0 * h);
    a[(G, F)] = r_eq_inv / t_g;
    a[(G, G)] = -1.0 / t_g;
    a[(L, F)] = t_1 * r_eq_inv / (t_2 * t_g);
    a[(L, G)] = (t_g - t_1) / (t_g * t_2);
    a[(L, L)] = -1.0 / t_2;
    a[(P, L)] = 1.0 / t_t;
    a[(P, P)] = -1.0 / t_t;

    let mut b = Vector4::zeros();
    b[F] = k_ev / (2.0 * h);
    let mut bw = Vector4::zeros();
    bw[F] = -1.0 / (2.0 * h);

    Ok(SystemMatrices { a, b, bw })
}

impl SystemMatrices {
    pub fn rhs(&self, x: &Vector4<f64>, u: f64, w: f64) -> Vector4<f64> {
        self.a * x + self.b * u + self.bw * w
    }

    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|c| (c.re, c.im))
            .collect()
    }

    pub fn is_hurwitz(&self) -> bool {
        self.eigenvalues().iter().all(|(re, _)| *re < 0.0)
    }

    /// Equilibrium `x*` with `A x* = -(B u + Bw w)`.
    pub fn steady_state(&self, u: f64, w: f64) -> Result<StateVec> {
        let rhs = -(self.b * u + self.bw * w);
        let lu = self.a.lu();
        let x = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("state matrix is singular".into()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("state matrix is singular".into()));
        }
        Ok(StateVec::from_vector(&x))
    }

    /// Zero-order-hold discretization for sampling period `tau`.
    pub fn discretize(&self, tau: f64) -> Result<Discretization> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        let mut m = SMatrix::<f64, 6, 6>::zeros();
        m.fixed_view_mut::<4, 4>(0, 0).copy_from(&self.a);
        m.fixed_view_mut::<4, 1>(0, 4).copy_from(&self.b);
        m.fixed_view_mut::<4, 1>(0, 5).copy_from(&self.bw);
        let e = (m * tau).exp();
        Ok(Discretization {
            tau,
            phi: e.fixed_view::<4, 4>(0, 0).into_owned(),
            gamma_u: e.fixed_view::<4, 1>(0, 4).into_owned(),
            gamma_w: e.fixed_view::<4, 1>(0, 5).into_owned(),
        })
    }

    pub fn step(&self, x: &StateVec, u: f64, w: f64, tau: f64, method: IntegrationMethod) -> Result<StateVec> {
        check_participation(u)?;
        match method {
            IntegrationMethod::Exact => Ok(self.discretize(tau)?.step(x, u, w)),
            IntegrationMethod::Rk4 => {
                if !(tau > 0.0) || !tau.is_finite() {
                    return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
                }
                Ok(self.rk4(x, u, w, tau))
            }
        }
    }

    fn rk4(&self, x: &StateVec, u: f64, w: f64, tau: f64) -> StateVec {
        let n = ((tau / 0.005).ceil() as usize).max(10);
        let h = tau / n as f64;
        let mut y = x.to_vector();
        for _ in 0..n {
            let k1 = self.rhs(&y, u, w);
            let k2 = self.rhs(&(y + k1 * (h / 2.0)), u, w);
            let k3 = self.rhs(&(y + k2 * (h / 2.0)), u, w);
            let k4 = self.rhs(&(y + k3 * h), u, w);
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        StateVec::from_vector(&y)
    }
}

/// Exact sampled-data map `x⁺ = Φ x + Γu u + Γw w` for one period.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretization {
    pub tau: f64,
    pub phi: Matrix4<f64>,
    pub gamma_u: Vector4<f64>,
    pub gamma_w: Vector4<f64>,
}

impl Discretization {
    pub fn step(&self, x: &StateVec, u: f64, w: f64) -> StateVec {
        let y = self.phi * x.to_vector() + self.gamma_u * u + self.gamma_w * w;
        StateVec::from_vector(&y)
    }
}

pub(crate) fn check_participation(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::ContractViolation(format!("participation {u} outside [0, 1]")))
    }
}

/// Control decision for one sampling interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub u: f64,
    pub phase: Phase,
}

/// Anything that picks a participation from the sampled state.
pub trait FeedbackLaw {
    fn decide(&mut self, t: f64, x: &StateVec) -> Result<Decision>;
}

/// Adapts a plain closure `(t, x) -> u` into a [`FeedbackLaw`].
pub struct FnLaw<F>(pub F);

impl<F: FnMut(f64, &StateVec) -> f64> FeedbackLaw for FnLaw<F> {
    fn decide(&mut self, t: f64, x: &StateVec) -> Result<Decision> {
        Ok(Decision {
            u: (self.0)(t, x),
            phase: Phase::NoControl,
        })
    }
}

/// Number of samples of a run of length `horizon` at period `tau`.
pub fn sample_count(horizon: f64, tau: f64) -> usize {
    (horizon / tau + 1e-9).floor() as usize + 1
}

/// Closed-loop sampled-data simulation.
///
/// The control and the disturbance are held constant over each period. The
/// returned trace has `⌊horizon/tau⌋ + 1` samples, sample `k` at `k·tau`.
#[allow(clippy::too_many_arguments)]
pub fn simulate<Law, Wf>(
    matrices: &SystemMatrices,
    f_nom: f64,
    x0: StateVec,
    law: &mut Law,
    w_profile: Wf,
    horizon: f64,
    tau: f64,
    method: IntegrationMethod,
) -> Result<Trace>
where
    Law: FeedbackLaw + ?Sized,
    Wf: Fn(f64) -> f64,
{
    if !(horizon >= tau) {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} must be at least tau {tau}"
        )));
    }
    let disc = matrices.discretize(tau)?;
    let n = sample_count(horizon, tau);
    let mut samples = Vec::with_capacity(n);
    let mut x = x0;
    for k in 0..n {
        let t = k as f64 * tau;
        let decision = law.decide(t, &x)?;
        check_participation(decision.u)?;
        let w = w_profile(t);
        samples.push(Sample {
            t,
            x,
            u: decision.u,
            w,
            phase: decision.phase,
        });
        x = match method {
            IntegrationMethod::Exact => disc.step(&x, decision.u, w),
            IntegrationMethod::Rk4 => matrices.rk4(&x, decision.u, w, tau),
        };
        if !x.is_finite() {
            return Err(Error::Numerical(format!("state diverged at t = {t}")));
        }
    }
    Ok(Trace { tau, f_nom, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gb() -> SystemMatrices {
        build_matrices(&GridParams::gb(ChargingMode::Uni)).unwrap()
    }

    #[test]
    fn matrix_entries_match_table_values() {
        let m = gb();
        let a = &m.a;
        let close = |x: f64, y: f64| (x - y).abs() < 1e-6;
        assert!(close(a[(F, F)], -0.125));
        assert!(close(a[(F, P)], 0.125));
        assert!(close(a[(G, F)], -2.0));
        assert!(close(a[(G, G)], -0.4));
        assert!(close(a[(L, F)], -0.333333));
        assert!(close(a[(L, G)], 0.0166667));
        assert!(close(a[(L, L)], -0.0833333));
        assert!(close(a[(P, L)], 2.0));
        assert!(close(a[(P, P)], -2.0));
        assert_eq!(a.iter().filter(|v| **v != 0.0).count(), 9);
        assert!(close(m.bw[F], -0.125));
        assert_eq!(m.bw.iter().skip(1).filter(|v| **v != 0.0).count(), 0);
        assert_eq!(m.b.iter().skip(1).filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn zero_gain_means_zero_input_vector() {
        let m = build_matrices(&GridParams::gb(ChargingMode::Bi).without_evs()).unwrap();
        assert_eq!(m.b, Vector4::zeros());
    }

    #[test]
    fn rejects_non_positive_time_constants() {
        let mut p = GridParams::gb(ChargingMode::Uni);
        p.t_2 = 0.0;
        assert!(matches!(build_matrices(&p), Err(Error::InvalidParameter(_))));
        let mut p = GridParams::gb(ChargingMode::Uni);
        p.h = -1.0;
        assert!(build_matrices(&p).is_err());
    }

    #[test]
    fn state_matrix_is_hurwitz() {
        let m = gb();
        for (re, _) in m.eigenvalues() {
            assert!(re < -1e-9, "eigenvalue real part {re}");
        }
    }

    #[test]
    fn steady_states() {
        let uni = gb();
        let x = uni.steady_state(0.0, 0.0).unwrap();
        assert!(x.norm_inf() < 1e-12);
        let x = uni.steady_state(0.0, NOMINAL_LOSS_W).unwrap();
        assert!((x.f() + 0.8).abs() < 1e-9);
        assert!((x.f() + 50.0 - 49.2).abs() < 1e-9);
        let x = uni.steady_state(1.0, NOMINAL_LOSS_W).unwrap();
        assert!((x.f() + 0.2).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_power_balance() {
        let params = GridParams::gb(ChargingMode::Bi);
        let m = build_matrices(&params).unwrap();
        for &(u, w) in &[(0.0, 4.8), (0.3, 4.56), (1.0, 1.0)] {
            let x = m.steady_state(u, w).unwrap();
            let balance = x.p() + params.k_ev * u - w - params.d * x.f();
            assert!(balance.abs() < 1e-9);
        }
    }

    #[test]
    fn equilibrium_is_invariant_under_step() {
        let m = gb();
        let x = m.steady_state(0.4, 4.8).unwrap();
        let y = m.step(&x, 0.4, 4.8, 100.0, IntegrationMethod::Exact).unwrap();
        assert!((y - x).norm_inf() < 1e-9);
    }

    #[test]
    fn step_from_rest_converges_to_steady_state() {
        let m = gb();
        let target = m.steady_state(0.0, 4.8).unwrap();
        let y = m
            .step(&StateVec::ZERO, 0.0, 4.8, 400.0, IntegrationMethod::Exact)
            .unwrap();
        assert!((y - target).norm_inf() < 1e-6);
        let zero = m.step(&StateVec::ZERO, 0.0, 0.0, 3.0, IntegrationMethod::Rk4).unwrap();
        assert_eq!(zero, StateVec::ZERO);
    }

    #[test]
    fn exact_and_rk4_agree() {
        let m = gb();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = StateVec(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
            let u = rng.random_range(0.0..=1.0);
            let w = rng.random_range(0.0..6.0);
            let a = m.step(&x, u, w, 0.25, IntegrationMethod::Exact).unwrap();
            let b = m.step(&x, u, w, 0.25, IntegrationMethod::Rk4).unwrap();
            assert!((a - b).norm_inf() < 1e-6);
        }
    }

    #[test]
    fn superposition() {
        let m = gb();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x1 = StateVec(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let x2 = StateVec(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let (u1, u2) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
            let (w1, w2) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
            let tau = 0.7;
            let m_ = IntegrationMethod::Exact;
            let both = m.step(&(x1 + x2), u1 + u2, w1 + w2, tau, m_).unwrap();
            let base = m.step(&StateVec::ZERO, 0.0, 0.0, tau, m_).unwrap();
            let a = m.step(&x1, u1, w1, tau, m_).unwrap();
            let b = m.step(&x2, u2, w2, tau, m_).unwrap();
            assert!(((both - base) - (a + b)).norm_inf() < 1e-9);
        }
    }

    #[test]
    fn rejects_participation_outside_unit_interval() {
        let m = gb();
        assert!(matches!(
            m.step(&StateVec::ZERO, 1.5, 0.0, 0.1, IntegrationMethod::Exact),
            Err(Error::ContractViolation(_))
        ));
        let mut law = FnLaw(|_t: f64, _x: &StateVec| -0.1);
        let err = simulate(&m, 50.0, StateVec::ZERO, &mut law, |_| 0.0, 1.0, 0.25, IntegrationMethod::Exact);
        assert!(matches!(err, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn trace_length_and_zero_run() {
        let m = gb();
        let mut law = FnLaw(|_t: f64, _x: &StateVec| 0.0);
        let tr = simulate(&m, 50.0, StateVec::ZERO, &mut law, |_| 0.0, 10.0, 0.25, IntegrationMethod::Exact).unwrap();
        assert_eq!(tr.samples.len(), 41);
        assert!(tr.samples.iter().all(|s| s.x == StateVec::ZERO));
        let tr = simulate(&m, 50.0, StateVec::ZERO, &mut law, |_| 0.0, 1.0, 0.3, IntegrationMethod::Rk4).unwrap();
        assert_eq!(tr.samples.len(), 4);
    }

    #[test]
    fn step_loss_undershoots_steady_state() {
        let m = gb();
        let mut law = FnLaw(|_t: f64, _x: &StateVec| 0.0);
        let tr = simulate(&m, 50.0, StateVec::ZERO, &mut law, |_| 4.8, 100.0, 0.05, IntegrationMethod::Rk4).unwrap();
        let min_f = tr.samples.iter().map(|s| s.x.f()).fold(f64::INFINITY, f64::min);
        assert!(min_f <= -0.8, "min f {min_f}");
    }

    #[test]
    fn loss_conversion_round_trips_nominal() {
        let p = GridParams::gb(ChargingMode::Uni);
        assert!((p.loss_mw_to_w(NOMINAL_LOSS_MW) - NOMINAL_LOSS_W).abs() < 1e-12);
        assert!((p.w_to_loss_mw(NOMINAL_LOSS_W) - NOMINAL_LOSS_MW).abs() < 1e-9);
    }
}
