use std::path::Path;
use std::process::ExitCode;

use specrnd::constraints::ConstraintError;
use specrnd::estimate::EstimateError;
use specrnd::market::MarketError;
use specrnd::operators::OperatorError;
use specrnd::qp::QpError;
use specrnd::spectral::SpectralError;
use thiserror::Error;

/// Failure classes with stable exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Infeasible(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::Optimizer(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::Bracket(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ConstraintError> for CliError {
    fn from(e: ConstraintError) -> Self {
        match e {
            ConstraintError::Spectral(s) => s.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<QpError> for CliError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::NoFeasibleCutoff { .. } => CliError::Infeasible(e.to_string()),
            QpError::Numerical(_) => CliError::Numerical(e.to_string()),
            QpError::Constraint(c) => c.into(),
        }
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        match e {
            EstimateError::Market(e) => e.into(),
            EstimateError::Constraint(e) => e.into(),
            EstimateError::Qp(e) => e.into(),
            EstimateError::Spectral(e) => e.into(),
            EstimateError::Operator(e) => e.into(),
            EstimateError::NotOptimal { .. } => CliError::Numerical(e.to_string()),
            EstimateError::Config(_) => CliError::Input(e.to_string()),
        }
    }
}
