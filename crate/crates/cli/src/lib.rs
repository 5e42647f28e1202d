//! Experiment driver behind the `flexcmh` command.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{DataSource, EvalConfig, ExperimentConfig, Setting};

/// Gradient checks that exceeded the tolerance.
#[derive(Debug, thiserror::Error)]
#[error("{failed} gradient checks exceeded the tolerance")]
pub struct NumericFailure {
    pub lines: Vec<String>,
    pub failed: usize,
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// 2 for numeric failures anywhere in the error chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<NumericFailure>().is_some()
            || e.downcast_ref::<flexcmh::Error>().is_some_and(flexcmh::Error::is_numeric)
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}
