//! Finite-trace LTL monitor and the frequency requirements built on it.
//!
//! Semantics over a trace of length `n`, position `i`:
//! - `Next φ` is strong: false at the last position.
//! - `φ U ψ` needs a witness `j ∈ [i, n)` with `ψ` at `j` and `φ` on `[i, j)`.
//! - `◊φ = true U φ`, `□φ = ¬◊¬φ`.
//! - `◊≤T φ` needs a witness within `⌊T/tau⌋` samples (and inside the trace).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::ChargingMode;
use crate::trace::{Sample, Trace};

/// Closed frequency interval in Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }
}

/// User predicate over a sample and its absolute frequency.
pub type SampleTest = Arc<dyn Fn(&Sample, f64) -> bool + Send + Sync>;

/// Sample predicate; frequency predicates read the absolute frequency in Hz.
#[derive(Clone)]
pub enum Predicate {
    FreqAtLeast(f64),
    FreqAtMost(f64),
    FreqIn(Interval),
    Custom(String, SampleTest),
}

impl Predicate {
    #[inline]
    fn holds(&self, sample: &Sample, f_hz: f64) -> bool {
        match self {
            Predicate::FreqAtLeast(c) => f_hz >= *c,
            Predicate::FreqAtMost(c) => f_hz <= *c,
            Predicate::FreqIn(iv) => iv.contains(f_hz),
            Predicate::Custom(_, f) => f(sample, f_hz),
        }
    }
}

impl fmt::Debug for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::FreqAtLeast(c) => write!(f, "f >= {c}"),
            Predicate::FreqAtMost(c) => write!(f, "f <= {c}"),
            Predicate::FreqIn(iv) => write!(f, "f in [{}, {}]", iv.lo, iv.hi),
            Predicate::Custom(name, _) => f.write_str(name),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Formula {
    True,
    Atom(Predicate),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Next(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
    Eventually(Box<Formula>),
    Always(Box<Formula>),
    /// Eventually within the given number of seconds.
    EventuallyWithin(f64, Box<Formula>),
}

impl Formula {
    pub fn atom(p: Predicate) -> Self {
        Formula::Atom(p)
    }
    pub fn constant(b: bool) -> Self {
        if b {
            Formula::True
        } else {
            Formula::True.not()
        }
    }
    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Formula::Not(Box::new(self))
    }
    pub fn and(self, rhs: Formula) -> Self {
        Formula::And(Box::new(self), Box::new(rhs))
    }
    pub fn or(self, rhs: Formula) -> Self {
        Formula::Or(Box::new(self), Box::new(rhs))
    }
    pub fn implies(self, rhs: Formula) -> Self {
        Formula::Implies(Box::new(self), Box::new(rhs))
    }
    pub fn next(self) -> Self {
        Formula::Next(Box::new(self))
    }
    pub fn until(self, rhs: Formula) -> Self {
        Formula::Until(Box::new(self), Box::new(rhs))
    }
    pub fn eventually(self) -> Self {
        Formula::Eventually(Box::new(self))
    }
    pub fn always(self) -> Self {
        Formula::Always(Box::new(self))
    }
    pub fn eventually_within(self, seconds: f64) -> Self {
        Formula::EventuallyWithin(seconds, Box::new(self))
    }
}

/// Truth value of `phi` at `position`.
pub fn eval(phi: &Formula, trace: &Trace, position: usize) -> Result<bool> {
    if position >= trace.len() {
        return Err(Error::ContractViolation(format!(
            "position {position} outside trace of length {}",
            trace.len()
        )));
    }
    Ok(eval_all(phi, trace)?[position])
}

/// Truth values of `phi` at every position, computed bottom-up.
pub fn eval_all(phi: &Formula, trace: &Trace) -> Result<Vec<bool>> {
    let n = trace.len();
    Ok(match phi {
        Formula::True => vec![true; n],
        Formula::Atom(p) => (0..n).map(|k| p.holds(&trace.samples[k], trace.f_hz(k))).collect(),
        Formula::Not(a) => eval_all(a, trace)?.into_iter().map(|v| !v).collect(),
        Formula::And(a, b) => zip_with(eval_all(a, trace)?, eval_all(b, trace)?, |x, y| x && y),
        Formula::Or(a, b) => zip_with(eval_all(a, trace)?, eval_all(b, trace)?, |x, y| x || y),
        Formula::Implies(a, b) => zip_with(eval_all(a, trace)?, eval_all(b, trace)?, |x, y| !x || y),
        Formula::Next(a) => {
            let v = eval_all(a, trace)?;
            (0..n).map(|k| k + 1 < n && v[k + 1]).collect()
        }
        Formula::Until(a, b) => {
            let (va, vb) = (eval_all(a, trace)?, eval_all(b, trace)?);
            let mut out = vec![false; n];
            let mut later = false;
            for k in (0..n).rev() {
                later = vb[k] || (va[k] && later);
                out[k] = later;
            }
            out
        }
        Formula::Eventually(a) => {
            let v = eval_all(a, trace)?;
            let mut out = vec![false; n];
            let mut later = false;
            for k in (0..n).rev() {
                later |= v[k];
                out[k] = later;
            }
            out
        }
        Formula::Always(a) => {
            let v = eval_all(a, trace)?;
            let mut out = vec![false; n];
            let mut later = true;
            for k in (0..n).rev() {
                later &= v[k];
                out[k] = later;
            }
            out
        }
        Formula::EventuallyWithin(secs, a) => {
            if !(*secs > 0.0) {
                return Err(Error::ContractViolation(format!(
                    "eventually-within bound must be positive, got {secs}"
                )));
            }
            let window = window_samples(*secs, trace.tau);
            let v = eval_all(a, trace)?;
            // index of the next witness at or after k
            let mut out = vec![false; n];
            let mut next = usize::MAX;
            for k in (0..n).rev() {
                if v[k] {
                    next = k;
                }
                out[k] = next != usize::MAX && next - k <= window;
            }
            out
        }
    })
}

/// `⌊seconds / tau⌋`, tolerant of representation error in the ratio.
pub fn window_samples(seconds: f64, tau: f64) -> usize {
    (seconds / tau + 1e-9).floor() as usize
}

fn zip_with(a: Vec<bool>, b: Vec<bool>, f: impl Fn(bool, bool) -> bool) -> Vec<bool> {
    a.into_iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

/// Grid-code thresholds and the two-stage target intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecConfig {
    pub f_nom: f64,
    pub c_zone: f64,
    pub stat_lim: Interval,
    /// Largest normal infeed loss (MW).
    pub n_loss: f64,
    /// Smallest infrequent infeed loss (MW).
    pub i_loss: f64,
    pub i1: Interval,
    pub i2: Interval,
    pub return_window: f64,
}

impl SpecConfig {
    pub fn for_mode(mode: ChargingMode) -> Self {
        let (i1, i2) = match mode {
            ChargingMode::Uni => (Interval::new(49.55, 50.0), Interval::new(49.75, 50.0)),
            ChargingMode::Bi => (Interval::new(49.70, 50.0), Interval::new(49.85, 50.0)),
        };
        SpecConfig {
            f_nom: 50.0,
            c_zone: 49.2,
            stat_lim: Interval::new(49.5, 50.5),
            n_loss: 1320.0,
            i_loss: 1800.0,
            i1,
            i2,
            return_window: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.i2.is_subset_of(&self.i1) {
            return Err(Error::Config("I2 must be contained in I1".into()));
        }
        if !self.stat_lim.contains(self.f_nom) {
            return Err(Error::Config("statutory limits must contain the nominal frequency".into()));
        }
        if !(self.return_window > 0.0) {
            return Err(Error::Config("return window must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig::for_mode(ChargingMode::Bi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub holds: bool,
    /// Time of the first sample at which the invariant body fails.
    pub first_violation_t: Option<f64>,
}

impl Verdict {
    fn conjunction(name: &str, parts: &[&Verdict]) -> Verdict {
        let first = parts
            .iter()
            .filter_map(|v| v.first_violation_t)
            .min_by(f64::total_cmp);
        Verdict {
            name: name.into(),
            holds: parts.iter().all(|v| v.holds),
            first_violation_t: first,
        }
    }
}

/// `□ body` when `guard` holds, vacuously true otherwise.
fn guarded_invariant(name: &str, guard: bool, body: &Formula, trace: &Trace) -> Result<Verdict> {
    if !guard {
        return Ok(Verdict {
            name: name.into(),
            holds: true,
            first_violation_t: None,
        });
    }
    let v = eval_all(body, trace)?;
    let first = v.iter().position(|b| !b).map(|k| trace.samples[k].t);
    Ok(Verdict {
        name: name.into(),
        holds: first.is_none(),
        first_violation_t: first,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequirementsReport {
    pub loss_mw: f64,
    pub psi1: Verdict,
    pub psi2: Verdict,
    pub psi3: Verdict,
    pub psi: Verdict,
}

fn f_in(iv: Interval) -> Formula {
    Formula::atom(Predicate::FreqIn(iv))
}

/// Containment, statutory-limit and 60-second-return requirements.
pub fn check_requirements(trace: &Trace, loss_mw: f64, cfg: &SpecConfig) -> Result<RequirementsReport> {
    if trace.is_empty() {
        return Err(Error::ContractViolation("empty trace".into()));
    }
    let safe = Formula::atom(Predicate::FreqAtLeast(cfg.c_zone));
    let stat = f_in(cfg.stat_lim);
    let psi1 = guarded_invariant("psi1", true, &safe, trace)?;
    let psi2 = guarded_invariant("psi2", loss_mw <= cfg.n_loss, &stat, trace)?;
    let returns = stat.clone().not().implies(stat.eventually_within(cfg.return_window));
    let psi3 = guarded_invariant("psi3", loss_mw >= cfg.i_loss, &returns, trace)?;
    let psi = Verdict::conjunction("psi", &[&psi1, &psi2, &psi3]);
    Ok(RequirementsReport {
        loss_mw,
        psi1,
        psi2,
        psi3,
        psi,
    })
}

/// The containment/I₁/I₂ specification, as full formulas.
pub fn two_stage_formula(cfg: &SpecConfig) -> Formula {
    let (safe, reach1, reach2) = two_stage_parts(cfg);
    safe.always().and(reach1.always()).and(reach2.always())
}

fn two_stage_parts(cfg: &SpecConfig) -> (Formula, Formula, Formula) {
    let safe = Formula::atom(Predicate::FreqAtLeast(cfg.c_zone));
    let reach1 = f_in(cfg.i1).not().implies(f_in(cfg.i1).eventually());
    let reach2 = f_in(cfg.i1)
        .and(f_in(cfg.i2).not())
        .implies(f_in(cfg.i2).eventually());
    (safe, reach1, reach2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub containment: Verdict,
    pub reach_i1: Verdict,
    pub reach_i2: Verdict,
    pub psi: Verdict,
}

pub fn check_two_stage(trace: &Trace, cfg: &SpecConfig) -> Result<TwoStageReport> {
    if trace.is_empty() {
        return Err(Error::ContractViolation("empty trace".into()));
    }
    let (safe, reach1, reach2) = two_stage_parts(cfg);
    let containment = guarded_invariant("containment", true, &safe, trace)?;
    let reach_i1 = guarded_invariant("reach_i1", true, &reach1, trace)?;
    let reach_i2 = guarded_invariant("reach_i2", true, &reach2, trace)?;
    let psi = Verdict::conjunction("psi", &[&containment, &reach_i1, &reach_i2]);
    Ok(TwoStageReport {
        containment,
        reach_i1,
        reach_i2,
        psi,
    })
}
