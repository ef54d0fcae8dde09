//! TOML experiment configuration and its resolution into concrete parameters.
//!
//! Every field is optional. Missing values take the defaults of the selected
//! charging mode, so `[ev] mode = "uni"` alone switches the fleet gain, the
//! target intervals and the working region together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::abstraction::{GridSpec, InputGrid, DEFAULT_MEMORY_BUDGET, GB_LOWER, GB_UPPER, WIDE_UPPER};
use crate::error::{Error, Result};
use crate::grid_model::{ChargingMode, GridParams, StateVec, NOMINAL_LOSS_MW};
use crate::spec_monitor::{Interval, SpecConfig};
use crate::synthesis::DeterminizationRule;

/// Scalar applied to every dimension, or one value per dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDim {
    Scalar(f64),
    Vector([f64; 4]),
}

impl PerDim {
    pub fn expand(self) -> [f64; 4] {
        match self {
            PerDim::Scalar(v) => [v; 4],
            PerDim::Vector(v) => v,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub r_eq_inv: Option<f64>,
    pub t_g: Option<f64>,
    pub t_t: Option<f64>,
    pub t_1: Option<f64>,
    pub t_2: Option<f64>,
    pub d: Option<f64>,
    pub h: Option<f64>,
    pub f_nom: Option<f64>,
    pub s_base: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvSection {
    pub mode: Option<ChargingMode>,
    pub k_ev: Option<f64>,
    pub t_ev: Option<f64>,
    pub r_ev: Option<f64>,
    pub deadband_hz: Option<f64>,
    pub p_av: Option<f64>,
    pub n_ev: Option<u32>,
}

/// Participation held once the frequency settles inside I₂.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldChoice {
    /// The last C2 command.
    LastCommand,
    /// The last C2 command clamped to the participations whose steady state
    /// lies in I₂ for every loss in the design range.
    Band,
    /// The participation centring the steady state in I₂, clamped as `Band`.
    #[default]
    Reference,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub loss_mw: Option<f64>,
    /// Hz-scaled loss; alternative to `loss_mw`.
    pub w: Option<f64>,
    pub horizon: Option<f64>,
    pub x0: Option<[f64; 4]>,
    /// Sample time of baseline runs.
    pub baseline_dt: Option<f64>,
    pub hold: Option<HoldChoice>,
}

/// Input selection inside the synthesized controllers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPreference {
    /// Keep the input picked by the determinization rule.
    Rule,
    /// Rank-decreasing input closest to the participation centring each
    /// stage's band.
    #[default]
    Reference,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbstractionSection {
    /// Region corners in `[f, g, l, p]` order (deviations).
    pub lower: Option<[f64; 4]>,
    pub upper: Option<[f64; 4]>,
    pub eta: Option<PerDim>,
    pub tau: Option<f64>,
    /// Number of uniformly spaced participation levels on `[0, 1]`.
    pub inputs: Option<usize>,
    /// Explicit participation levels; excludes `inputs`.
    pub levels: Option<Vec<f64>>,
    /// Design loss range as fractions of the scenario loss.
    pub w_range_fraction: Option<[f64; 2]>,
    /// Design loss range in Hz-scaled units; excludes `w_range_fraction`.
    pub w_range: Option<[f64; 2]>,
    pub rule: Option<DeterminizationRule>,
    pub preference: Option<InputPreference>,
    pub memory_budget_mb: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecSection {
    pub c_zone: Option<f64>,
    pub stat_lim: Option<[f64; 2]>,
    pub n_loss: Option<f64>,
    pub i_loss: Option<f64>,
    pub i1: Option<[f64; 2]>,
    pub i2: Option<[f64; 2]>,
    pub return_window: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub delta_max: f64,
    pub seeds: u64,
    pub base_seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            delta_max: 0.1,
            seeds: 100,
            base_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            plots: true,
        }
    }
}

/// The configuration file as written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridSection,
    pub ev: EvSection,
    pub scenario: ScenarioSection,
    pub abstraction: AbstractionSection,
    pub spec: SpecSection,
    pub robustness: RobustnessConfig,
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults for `mode` with nothing overridden.
    pub fn for_mode(mode: ChargingMode) -> Self {
        let mut c = ScenarioConfig::default();
        c.ev.mode = Some(mode);
        c
    }

    pub fn resolve(&self) -> Result<Experiment> {
        let mode = self.ev.mode.unwrap_or(ChargingMode::Bi);
        let mut params = GridParams::gb(mode);
        let g = &self.grid;
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut params.r_eq_inv, g.r_eq_inv);
        set(&mut params.t_g, g.t_g);
        set(&mut params.t_t, g.t_t);
        set(&mut params.t_1, g.t_1);
        set(&mut params.t_2, g.t_2);
        set(&mut params.d, g.d);
        set(&mut params.h, g.h);
        set(&mut params.f_nom, g.f_nom);
        set(&mut params.s_base, g.s_base);
        let ev = &self.ev;
        set(&mut params.k_ev, ev.k_ev);
        set(&mut params.t_ev, ev.t_ev);
        set(&mut params.r_ev, ev.r_ev);
        set(&mut params.deadband_hz, ev.deadband_hz);
        set(&mut params.p_av, ev.p_av);
        if let Some(n) = ev.n_ev {
            params.n_ev = n;
        }
        params.validate().map_err(|e| Error::Config(e.to_string()))?;

        let sc = &self.scenario;
        let (loss_mw, w) = match (sc.loss_mw, sc.w) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either scenario.loss_mw or scenario.w, not both".into()))
            }
            (None, Some(w)) => (params.w_to_loss_mw(w), w),
            (loss, None) => {
                let loss = loss.unwrap_or(NOMINAL_LOSS_MW);
                (loss, params.loss_mw_to_w(loss))
            }
        };
        if !(loss_mw >= 0.0) || !loss_mw.is_finite() {
            return Err(Error::Config(format!("loss must be a non-negative number, got {loss_mw} MW")));
        }
        let horizon = sc.horizon.unwrap_or(200.0);
        let baseline_dt = sc.baseline_dt.unwrap_or(0.01);
        if !(horizon > 0.0) || !(baseline_dt > 0.0) {
            return Err(Error::Config("scenario.horizon and scenario.baseline_dt must be positive".into()));
        }

        let ab = &self.abstraction;
        let defaults = AbstractionDefaults::for_mode(mode);
        let lower = ab.lower.unwrap_or(GB_LOWER);
        let upper = ab.upper.unwrap_or(defaults.upper);
        let eta = ab.eta.map_or([defaults.eta; 4], PerDim::expand);
        let grid = GridSpec::new(lower, upper, eta).map_err(|e| Error::Config(e.to_string()))?;
        let tau = ab.tau.unwrap_or(defaults.tau);
        if !(tau > 0.0) {
            return Err(Error::Config(format!("abstraction.tau must be positive, got {tau}")));
        }
        let inputs = match (&ab.levels, ab.inputs) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either abstraction.levels or abstraction.inputs".into()))
            }
            (Some(levels), None) => InputGrid::new(levels.clone()),
            (None, n) => InputGrid::uniform(n.unwrap_or(21)),
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        let w_range = match (ab.w_range, ab.w_range_fraction) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either abstraction.w_range or abstraction.w_range_fraction".into(),
                ))
            }
            (Some([a, b]), None) => (a, b),
            (None, frac) => {
                let [a, b] = frac.unwrap_or([0.95, 1.0]);
                (a * w, b * w)
            }
        };
        if !(w_range.0 <= w_range.1) {
            return Err(Error::Config(format!("empty design loss range {w_range:?}")));
        }
        if !(w_range.0 - 1e-12 <= w && w <= w_range.1 + 1e-12) {
            return Err(Error::Config(format!(
                "scenario loss w = {w} lies outside the design range {w_range:?}"
            )));
        }
        let memory_budget = ab
            .memory_budget_mb
            .map_or(DEFAULT_MEMORY_BUDGET, |mb| mb.saturating_mul(1 << 20));

        let mut spec = SpecConfig::for_mode(mode);
        spec.f_nom = params.f_nom;
        let sp = &self.spec;
        let interval = |v: [f64; 2], name: &str| -> Result<Interval> {
            if v[0] > v[1] {
                return Err(Error::Config(format!("spec.{name} has lo > hi")));
            }
            Ok(Interval::new(v[0], v[1]))
        };
        set(&mut spec.c_zone, sp.c_zone);
        set(&mut spec.n_loss, sp.n_loss);
        set(&mut spec.i_loss, sp.i_loss);
        set(&mut spec.return_window, sp.return_window);
        if let Some(v) = sp.stat_lim {
            spec.stat_lim = interval(v, "stat_lim")?;
        }
        if let Some(v) = sp.i1 {
            spec.i1 = interval(v, "i1")?;
        }
        if let Some(v) = sp.i2 {
            spec.i2 = interval(v, "i2")?;
        }
        spec.validate()?;

        let rb = &self.robustness;
        if !(0.0..1.0).contains(&rb.delta_max) {
            return Err(Error::Config(format!("robustness.delta_max must lie in [0, 1), got {}", rb.delta_max)));
        }

        Ok(Experiment {
            mode,
            params,
            loss_mw,
            w,
            horizon,
            x0: StateVec(sc.x0.unwrap_or([0.0; 4])),
            baseline_dt,
            hold: sc.hold.unwrap_or_default(),
            grid,
            inputs,
            tau,
            w_range,
            rule: ab.rule.unwrap_or_default(),
            preference: ab.preference.unwrap_or_default(),
            memory_budget,
            spec,
            robustness: rb.clone(),
            output: self.output.clone(),
        })
    }
}

/// Coarse grid for quick runs: 0.1 in `g, l, p`, 0.05 in `f` so that the
/// target band edges stay on row boundaries.
pub const CI_ETA: [f64; 4] = [0.05, 0.1, 0.1, 0.1];

/// Mode-dependent abstraction defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbstractionDefaults {
    pub upper: [f64; 4],
    pub eta: f64,
    pub tau: f64,
}

impl AbstractionDefaults {
    pub fn for_mode(mode: ChargingMode) -> Self {
        match mode {
            ChargingMode::Bi => AbstractionDefaults {
                upper: GB_UPPER,
                eta: 0.05,
                tau: 0.5,
            },
            // the unidirectional fleet drives the governor state past g = 3
            ChargingMode::Uni => AbstractionDefaults {
                upper: WIDE_UPPER,
                eta: 0.05,
                tau: 1.0,
            },
        }
    }
}

/// Fully resolved experiment parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Experiment {
    pub mode: ChargingMode,
    pub params: GridParams,
    pub loss_mw: f64,
    /// Hz-scaled loss.
    pub w: f64,
    pub horizon: f64,
    pub x0: StateVec,
    pub baseline_dt: f64,
    pub hold: HoldChoice,
    pub grid: GridSpec,
    pub inputs: InputGrid,
    pub tau: f64,
    pub w_range: (f64, f64),
    pub rule: DeterminizationRule,
    pub preference: InputPreference,
    pub memory_budget: usize,
    pub spec: SpecConfig,
    pub robustness: RobustnessConfig,
    pub output: OutputConfig,
}

impl Experiment {
    /// Hash of every resolved parameter except the output settings.
    pub fn config_hash(&self) -> String {
        let mut e = self.clone();
        e.output = OutputConfig::default();
        crate::io::hash_hex(&serde_json::to_vec(&e).expect("serializable"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::NOMINAL_LOSS_W;

    #[test]
    fn empty_config_is_bidirectional_default() {
        let e = ScenarioConfig::from_toml("").unwrap().resolve().unwrap();
        assert_eq!(e.mode, ChargingMode::Bi);
        assert_eq!(e.params.k_ev, 7.2);
        assert_eq!(e.grid.total_cells(), 2_112_000);
        assert_eq!(e.inputs.len(), 21);
        assert!((e.w - NOMINAL_LOSS_W).abs() < 1e-12);
        assert!((e.w_range.0 - 0.95 * NOMINAL_LOSS_W).abs() < 1e-12);
        assert_eq!(e.spec.i1, Interval::new(49.70, 50.0));
        assert_eq!(e.spec.i2, Interval::new(49.85, 50.0));
    }

    #[test]
    fn mode_switches_gain_and_intervals() {
        let e = ScenarioConfig::from_toml("[ev]\nmode = \"uni\"\n").unwrap().resolve().unwrap();
        assert_eq!(e.params.k_ev, 3.6);
        assert_eq!(e.spec.i1, Interval::new(49.55, 50.0));
        assert_eq!(e.spec.i2, Interval::new(49.75, 50.0));
        let explicit = ScenarioConfig::from_toml("[ev]\nmode = \"uni\"\nk_ev = 1.0\n[spec]\ni2 = [49.8, 50.0]\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(explicit.params.k_ev, 1.0);
        assert_eq!(explicit.spec.i2, Interval::new(49.8, 50.0));
    }

    #[test]
    fn full_file_parses() {
        let text = r#"
            [grid]
            h = 4.0
            [ev]
            mode = "bi"
            deadband_hz = 0.2
            [scenario]
            loss_mw = 1000
            horizon = 120
            x0 = [0.0, 0.0, 0.0, 0.0]
            hold = "band"
            [abstraction]
            lower = [-1.0, 0.0, 0.0, 0.0]
            upper = [0.1, 3.0, 2.0, 2.0]
            eta = [0.1, 0.1, 0.1, 0.1]
            tau = 0.25
            levels = [0.0, 0.5, 1.0]
            w_range_fraction = [0.9, 1.0]
            rule = "min_rank_then_min_u"
            preference = "rule"
            memory_budget_mb = 512
            [spec]
            c_zone = 49.2
            [robustness]
            delta_max = 0.05
            seeds = 10
            base_seed = 7
            [output]
            dir = "results"
            plots = false
        "#;
        let e = ScenarioConfig::from_toml(text).unwrap().resolve().unwrap();
        assert!((e.w - 2.4).abs() < 1e-12);
        assert_eq!(e.grid.counts, [11, 30, 20, 20]);
        assert_eq!(e.inputs.levels(), &[0.0, 0.5, 1.0]);
        assert_eq!(e.rule, DeterminizationRule::MinRankThenMinU);
        assert_eq!(e.preference, InputPreference::Rule);
        assert_eq!(e.hold, HoldChoice::Band);
        assert_eq!(e.memory_budget, 512 << 20);
        assert_eq!(e.robustness.seeds, 10);
        assert_eq!(e.output.dir, PathBuf::from("results"));
        assert_eq!(e.params.deadband_hz, 0.2);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "[grid]\nbogus = 1\n",
            "[ev]\nmode = \"tri\"\n",
            "[scenario]\nloss_mw = 2000\nw = 4.8\n",
            "[abstraction]\neta = 0.07\n",
            "[abstraction]\ninputs = 3\nlevels = [0.0, 1.0]\n",
            "[abstraction]\nw_range = [1.0, 2.0]\n",
            "[spec]\ni2 = [49.0, 50.0]\n",
            "[robustness]\ndelta_max = 1.5\n",
            "[scenario]\nhorizon = -1\n",
        ] {
            let r = ScenarioConfig::from_toml(text).and_then(|c| c.resolve());
            assert!(matches!(r, Err(Error::Config(_))), "{text}: {r:?}");
        }
    }

    #[test]
    fn hash_tracks_parameters_but_not_output() {
        let a = ScenarioConfig::default().resolve().unwrap();
        let mut c = ScenarioConfig::default();
        c.output.dir = "elsewhere".into();
        assert_eq!(a.config_hash(), c.resolve().unwrap().config_hash());
        c.scenario.horizon = Some(100.0);
        assert_ne!(a.config_hash(), c.resolve().unwrap().config_hash());
    }

    #[test]
    fn loss_can_be_given_scaled() {
        let e = ScenarioConfig::from_toml("[scenario]\nw = 2.4\n").unwrap().resolve().unwrap();
        assert!((e.loss_mw - 1000.0).abs() < 1e-9);
    }
}
