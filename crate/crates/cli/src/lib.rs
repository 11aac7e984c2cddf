//! Scenario-driven front end for the `geocon` library: load a JSON scenario,
//! run one analysis and emit a JSON report (plus CSV for curves).

pub mod commands;
pub mod report;
pub mod scenario;

use thiserror::Error;

pub use commands::{run_command, Command, Options, Outcome};
pub use scenario::{load_scenario, parse_scenario, Scenario};

/// Exit status when an analysis ran but its verdict failed.
pub const EXIT_VERDICT: i32 = 2;
/// Exit status for tool errors.
pub const EXIT_ERROR: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("expression error at {pointer}, column {column}: {message}")]
    Expression {
        pointer: String,
        column: usize,
        message: String,
    },
    #[error("this command needs the \"{0}\" block")]
    MissingBlock(&'static str),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{context}: {message}")]
    Analysis { context: String, message: String },
}

impl CliError {
    pub fn analysis(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        CliError::Analysis {
            context: context.into(),
            message: err.to_string(),
        }
    }
}
