use std::fmt;

use qadp::adp::AdpError;
use qadp::hydrology::HydroError;
use qadp::model::ModelError;
use qadp::sim::SimError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
    pub fn numerical(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERICAL, message: message.into() }
    }

    /// Prefixes the message, keeping the code.
    pub fn context(self, what: &str) -> Self {
        Self { message: format!("{what}: {}", self.message), ..self }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<HydroError> for CliError {
    fn from(e: HydroError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => Self::data(e.to_string()),
            ModelError::OutOfBounds { .. } => Self::numerical(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<AdpError> for CliError {
    fn from(e: AdpError) -> Self {
        let msg = e.to_string();
        match e {
            AdpError::Config(_) => Self::config(msg),
            AdpError::Model(m) => Self::from(m),
            AdpError::Sampling { .. } => Self::data(msg),
            AdpError::Qp { .. } | AdpError::Status { .. } | AdpError::Fit { .. } => Self::numerical(msg),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let msg = e.to_string();
        match e {
            SimError::Adp(a) => Self::from(a),
            SimError::Hydro(h) => Self::from(h),
            SimError::Model { .. } | SimError::Infeasible { .. } => Self::numerical(msg),
            SimError::Mismatch(_) | SimError::Invalid(_) => Self::config(msg),
            SimError::NoYears | SimError::Io { .. } => Self::data(msg),
        }
    }
}
