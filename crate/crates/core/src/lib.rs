//! Symbolic controller synthesis for EV-assisted primary frequency regulation.
//!
//! The crate builds a finite abstraction of the linearised GB load-frequency
//! model, solves reach/reach-avoid/safety games on it, composes two reach
//! controllers into a phase supervisor, and checks closed-loop traces against
//! finite-trace LTL requirements. A droop-based EV controller is included as
//! the comparison baseline.

// negated comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod config;
pub mod error;
pub mod ev_baseline;
pub mod experiment;
pub mod grid_model;
pub mod io;
pub mod multiphase;
pub mod plot;
pub mod spec_monitor;
pub mod synthesis;
pub mod trace;

pub use config::{Experiment, ScenarioConfig};
pub use abstraction::{build_symbolic_model, state_to_cell, GridSpec, InputGrid, SymbolicModel};
pub use error::{Error, Result};
pub use grid_model::{build_matrices, ChargingMode, GridParams, IntegrationMethod, StateVec, SystemMatrices};
pub use multiphase::Phase;
pub use spec_monitor::{check_requirements, check_two_stage, Formula, SpecConfig};
pub use synthesis::{CellSet, Controller, ControllerKind, DeterminizationRule};
pub use trace::Trace;
