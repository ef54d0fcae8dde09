//! End-to-end runs built from a resolved [`Experiment`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{build_symbolic_model_with_budget, SymbolicModel};
use crate::config::{Experiment, HoldChoice, InputPreference};
use crate::error::{Error, Result};
use crate::ev_baseline::{sweep_deadband, BaselineScenario, SweepRow};
use crate::grid_model::{build_matrices, SystemMatrices};
use crate::multiphase::{
    reference_participation, run_supervised, steady_state_band, synthesize_stage, ClosedLoopScenario,
    HoldRule, Perturbation, TwoStageOptions,
};
use crate::spec_monitor::{check_requirements, check_two_stage, RequirementsReport, SpecConfig, TwoStageReport};
use crate::synthesis::Controller;
use crate::trace::Trace;

/// Which target a single synthesized controller reaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    I1,
    I2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::I1 => "c1",
            Stage::I2 => "c2",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i1" => Ok(Stage::I1),
            "i2" => Ok(Stage::I2),
            other => Err(Error::Config(format!("unknown target `{other}`, expected i1 or i2"))),
        }
    }
}

impl Experiment {
    pub fn matrices(&self) -> Result<SystemMatrices> {
        build_matrices(&self.params)
    }

    pub fn build_model(&self) -> Result<SymbolicModel> {
        build_symbolic_model_with_budget(
            &self.grid,
            &self.inputs,
            self.w_range,
            self.tau,
            &self.matrices()?,
            self.memory_budget,
        )
    }

    /// Hash the model built from this experiment carries.
    pub fn model_hash(&self) -> Result<String> {
        Ok(crate::abstraction::config_hash(
            &self.matrices()?,
            &self.grid,
            &self.inputs,
            self.tau,
            self.w_range,
        ))
    }

    pub fn two_stage_options(&self) -> TwoStageOptions {
        TwoStageOptions {
            rule: self.rule,
            reference_w: match self.preference {
                InputPreference::Rule => None,
                InputPreference::Reference => Some(self.w),
            },
        }
    }

    pub fn synthesize(&self, model: &SymbolicModel, stage: Stage) -> Result<Controller> {
        self.check_model(model)?;
        let band = match stage {
            Stage::I1 => self.spec.i1,
            Stage::I2 => self.spec.i2,
        };
        synthesize_stage(model, &self.matrices()?, &self.spec, band, stage.name(), self.two_stage_options())
    }

    fn check_model(&self, model: &SymbolicModel) -> Result<()> {
        let expected = self.model_hash()?;
        if model.config_hash != expected {
            return Err(Error::Config(format!(
                "symbolic model {} was built from a different configuration (expected {expected})",
                model.config_hash
            )));
        }
        Ok(())
    }

    pub fn hold_rule(&self) -> Result<HoldRule> {
        let m = self.matrices()?;
        let lo = self.spec.i2.lo - self.spec.f_nom;
        let hi = self.spec.i2.hi - self.spec.f_nom;
        let band = steady_state_band(&m, lo, hi, self.w_range)?;
        Ok(match (self.hold, band) {
            (HoldChoice::LastCommand, _) | (HoldChoice::Band, None) => HoldRule::LastCommand,
            (HoldChoice::Band, Some((lo, hi))) => HoldRule::Clamp { lo, hi },
            (HoldChoice::Reference, band) => {
                let u = reference_participation(&m, lo, hi, self.w)?;
                HoldRule::Constant {
                    u: band.map_or(u, |(a, b)| u.clamp(a, b)),
                }
            }
        })
    }

    pub fn closed_loop_scenario(&self) -> Result<ClosedLoopScenario> {
        Ok(ClosedLoopScenario {
            x0: self.x0,
            w: self.w,
            horizon: self.horizon,
            tau: self.tau,
            hold: self.hold_rule()?,
        })
    }

    pub fn run_symbolic(&self, c1: &Controller, c2: &Controller, perturbation: Option<Perturbation>) -> Result<Trace> {
        for c in [c1, c2] {
            if c.grid.as_ref() != Some(&self.grid) {
                return Err(Error::Config(format!("controller {} uses a different grid", c.name)));
            }
        }
        run_supervised(&self.matrices()?, c1, c2, &self.spec, &self.closed_loop_scenario()?, perturbation)
    }

    pub fn baseline_scenario(&self) -> BaselineScenario {
        BaselineScenario {
            params: self.params.clone(),
            w: self.w,
            horizon: self.horizon,
            tau: self.baseline_dt,
        }
    }

    pub fn run_baseline(&self) -> Result<Trace> {
        crate::ev_baseline::run_baseline(&self.baseline_scenario())
    }

    pub fn run_sweep(&self, half_widths: &[f64]) -> Result<Vec<SweepRow>> {
        sweep_deadband(half_widths, self.mode, &self.baseline_scenario())
    }

    pub fn verdict(&self, trace: &Trace) -> Result<Verdicts> {
        Ok(Verdicts {
            two_stage: check_two_stage(trace, &self.spec)?,
            requirements: check_requirements(trace, self.loss_mw, &self.spec)?,
            min_f_hz: trace.min_f_hz(),
            final_f_hz: trace.final_f_hz().unwrap_or(f64::NAN),
            i2_entry_t: i2_entry_time(trace, &self.spec),
        })
    }

    /// Seeded perturbed runs, `seeds` of them starting at `base_seed`, run in
    /// parallel on the current rayon pool.
    pub fn run_robustness(&self, c1: &Controller, c2: &Controller) -> Result<RobustnessReport> {
        let rb = &self.robustness;
        let runs: Vec<RunSummary> = (0..rb.seeds)
            .into_par_iter()
            .map(|k| {
                let seed = rb.base_seed.wrapping_add(k);
                let p = Perturbation::new(rb.delta_max, seed)?;
                Ok(match self.run_symbolic(c1, c2, Some(p)) {
                    Ok(trace) => {
                        let v = self.verdict(&trace)?;
                        RunSummary {
                            seed,
                            psi: v.two_stage.psi.holds,
                            min_f_hz: Some(v.min_f_hz),
                            final_f_hz: Some(v.final_f_hz),
                            i2_entry_t: v.i2_entry_t,
                            error: None,
                        }
                    }
                    Err(e @ (Error::NotWinning { .. } | Error::OutsideRegion { .. })) => RunSummary {
                        seed,
                        psi: false,
                        min_f_hz: None,
                        final_f_hz: None,
                        i2_entry_t: None,
                        error: Some(e.to_string()),
                    },
                    Err(e) => return Err(e),
                })
            })
            .collect::<Result<_>>()?;
        Ok(RobustnessReport::new(rb.delta_max, runs))
    }
}

/// Both monitor reports plus headline numbers of one trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub two_stage: TwoStageReport,
    pub requirements: RequirementsReport,
    pub min_f_hz: f64,
    pub final_f_hz: f64,
    pub i2_entry_t: Option<f64>,
}

/// Time of the first sample inside I₂ after the frequency has left I₁, or
/// the first sample inside I₂ when it never leaves I₁.
pub fn i2_entry_time(trace: &Trace, cfg: &SpecConfig) -> Option<f64> {
    let f = |k: usize| trace.f_hz(k);
    let start = (0..trace.len()).find(|&k| !cfg.i1.contains(f(k))).unwrap_or(0);
    (start..trace.len()).find(|&k| cfg.i2.contains(f(k))).map(|k| trace.samples[k].t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub psi: bool,
    pub min_f_hz: Option<f64>,
    pub final_f_hz: Option<f64>,
    pub i2_entry_t: Option<f64>,
    /// Set when the run stopped early, e.g. on a non-winning cell.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub delta_max: f64,
    pub passed: usize,
    pub total: usize,
    pub pass_rate: f64,
    pub worst_i2_entry_t: Option<f64>,
    pub runs: Vec<RunSummary>,
}

impl RobustnessReport {
    pub fn new(delta_max: f64, runs: Vec<RunSummary>) -> Self {
        let passed = runs.iter().filter(|r| r.psi).count();
        let total = runs.len();
        let worst = runs
            .iter()
            .filter_map(|r| r.i2_entry_t)
            .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))));
        RobustnessReport {
            delta_max,
            passed,
            total,
            pass_rate: if total == 0 { 0.0 } else { passed as f64 / total as f64 },
            worst_i2_entry_t: worst,
            runs,
        }
    }

    pub const CSV_HEADER: &'static str = "seed,psi,min_f_hz,final_f_hz,i2_entry_t,error";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed,
                r.psi,
                opt(r.min_f_hz),
                opt(r.final_f_hz),
                opt(r.i2_entry_t),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        out
    }
}
