use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Symbolic frequency-response controller synthesis and simulation.
#[derive(Parser, Debug)]
#[command(name = "freqsynth", version, about)]
pub struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for perturbed runs; overrides `[robustness] base_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ControllerKind {
    Baseline,
    Symbolic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    I1,
    I2,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the symbolic model and write it to the output directory.
    Abstract,
    /// Solve the reach-avoid controllers on a previously built model.
    Synth {
        #[arg(long, value_enum, default_value = "both")]
        target: TargetArg,
        /// Model file; `<out>/model.fsm` by default.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also export the controllers as CSV tables.
        #[arg(long)]
        csv: bool,
    },
    /// Run one closed loop and check it against the specification.
    Simulate {
        #[arg(long, value_enum, default_value = "symbolic")]
        controller: ControllerKind,
        /// Apply the configured participation uncertainty with `--seed`.
        #[arg(long)]
        robust: bool,
    },
    /// Run the droop baseline controller.
    Baseline {
        /// Disconnect the EV fleet.
        #[arg(long)]
        no_ev: bool,
    },
    /// Deadband sweep of the baseline for both charging modes.
    Sweep,
    /// Batch of seeded perturbed symbolic runs.
    Robustness,
    /// Check a trace CSV against the specification.
    Check {
        #[arg(long)]
        trace: PathBuf,
    },
}

/// Process exit statuses.
pub const EXIT_OK: u8 = 0;
pub const EXIT_SPEC_FAIL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code_for(&e))
        }
    }
}
