//! Command-line harness for latent-mixture bandit experiments.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 some
//! simulation cell failed, 4 rank-deficient moments, 5 degenerate model
//! constants.

pub mod commands;
pub mod config;
pub mod harness;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CELL_FAILED: i32 = 3;
pub const EXIT_RANK_DEFICIENT: i32 = 4;
pub const EXIT_DEGENERATE: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0} of {1} cells failed")]
    CellsFailed(usize, usize),

    #[error("degenerate model constant: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Core(#[from] lbl_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::CellsFailed(..) => EXIT_CELL_FAILED,
            CliError::Degenerate(_) => EXIT_DEGENERATE,
            CliError::Core(lbl_core::Error::RankDeficient { .. }) => EXIT_RANK_DEFICIENT,
            _ => EXIT_OTHER,
        }
    }
}
