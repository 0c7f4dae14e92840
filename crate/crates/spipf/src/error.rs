//! Crate-wide error type.

use crate::hybrid::ModeId;
use crate::ilqr::GainSchedule;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// More than one guard of the current mode triggered within a single step.
    #[error("{count} guards triggered simultaneously in mode {mode:?} at t={t}")]
    MultipleGuards { t: f64, mode: ModeId, count: usize },

    /// A state, Jacobian, or cost became non-finite.
    #[error("numerical divergence: {context}")]
    NumericalDivergence { context: String },

    /// Transversality violated: the guard rate |∂_t g + ∂_x g · F| is below tolerance.
    #[error("grazing contact: guard rate {rate:.3e} below tolerance")]
    GrazingContact { rate: f64 },

    /// The finite-difference saltation oracle could not resolve the transition.
    #[error("saltation oracle inapplicable: {context}")]
    OracleInapplicable { context: String },

    #[error("precondition violated: {what}")]
    Precondition { what: String },

    /// A reference in the requested mode cannot be produced within one transition.
    #[error("mode mismatch: no reference available in mode {target:?}")]
    ModeMismatch { target: ModeId },

    #[error("shape error: {what}")]
    Shape { what: String },

    #[error("index {index} outside window [{start}, {end})")]
    OutOfWindow { index: usize, start: usize, end: usize },

    /// Regularization exhausted before any accepted iterate; the last valid
    /// (initial-nominal) schedule is carried for callers that can degrade gracefully.
    #[error("iLQR stalled: regularization exhausted at reg={reg:.3e}")]
    SolverStalled { reg: f64, schedule: Box<GainSchedule> },

    /// Every particle in the ensemble carries zero weight.
    #[error("degenerate ensemble at step {step}: all particle weights vanished")]
    DegenerateEnsemble { step: usize },

    #[error("filter failed at step {step}: {context}")]
    FilterFailure { step: usize, context: String },

    #[error("experiment failed: {context}")]
    Experiment { context: String },

    #[error("config error: {context}")]
    Config { context: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short code for machine-readable CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MultipleGuards { .. } => "multiple_guards",
            Error::NumericalDivergence { .. } => "numerical_divergence",
            Error::GrazingContact { .. } => "grazing_contact",
            Error::OracleInapplicable { .. } => "oracle_inapplicable",
            Error::Precondition { .. } => "precondition",
            Error::ModeMismatch { .. } => "mode_mismatch",
            Error::Shape { .. } => "shape",
            Error::OutOfWindow { .. } => "out_of_window",
            Error::SolverStalled { .. } => "solver_stalled",
            Error::DegenerateEnsemble { .. } => "degenerate_ensemble",
            Error::FilterFailure { .. } => "filter_failure",
            Error::Experiment { .. } => "experiment",
            Error::Config { .. } => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
