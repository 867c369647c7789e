use thiserror::Error;

use crate::params::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter validation failed:\n{0}")]
    Validation(ValidationReport),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    /// Integration produced a non-finite value.
    #[error("{what}: blow-up at node {node} (t = {t})")]
    BlowUp {
        what: &'static str,
        node: usize,
        t: f64,
    },

    /// `R_t` in the linearised Riccati representation became singular.
    #[error("representation breakdown at node {node} (t = {t}): condition number {condition:e}")]
    RepresentationBreakdown { node: usize, t: f64, condition: f64 },

    /// `g_a` vanished at an interior node, so the externalisation rate is undefined there.
    #[error("externalisation rate undefined at node {node} (t = {t}): g_a = 0")]
    UndefinedRate { node: usize, t: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("ensemble does not carry {0}")]
    MissingData(&'static str),
}
