use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(
        "memory budget exceeded: {cells} cells x {inputs} inputs = {pairs} transition pairs \
         need {required_bytes} bytes, budget is {budget_bytes} bytes"
    )]
    MemoryBudget {
        cells: usize,
        inputs: usize,
        pairs: usize,
        required_bytes: usize,
        budget_bytes: usize,
    },

    #[error("cell {cell} is not in the winning set of controller {controller}; guarantee void")]
    NotWinning { cell: usize, controller: String },

    #[error("state {state:?} lies outside the working region")]
    OutsideRegion { state: [f64; 4] },

    #[error("config hash mismatch in {path}: file has {found}, expected {expected}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
