//! Error classification for process exit codes.

use stn_core::encoder::EncoderError;
use stn_core::episodic::{DataError, EpisodicError};
use stn_core::fusion::FusionError;
use stn_core::metrics::MetricError;

/// One-line diagnostics bucketed by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: bad flags or an invalid configuration.
    Usage(String),
    /// Exit 2: unreadable, malformed, or insufficient data.
    Data(String),
    /// Exit 3: numerical failure (non-positive-definite, non-finite).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => Self::Usage(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<EpisodicError> for CliError {
    fn from(e: EpisodicError) -> Self {
        match &e {
            EpisodicError::InvalidConfig(_) => Self::Usage(e.to_string()),
            EpisodicError::Data(DataError::InvalidSpec(_)) => Self::Usage(e.to_string()),
            _ if e.is_numerical() => Self::Numerical(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::InvalidConfig(_) => Self::Usage(e.to_string()),
            EncoderError::NonFiniteLoss | EncoderError::Numerics(_) => {
                Self::Numerical(e.to_string())
            }
            EncoderError::DimensionMismatch(_) => Self::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::Numerical(e.to_string())
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        Self::Numerical(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(format!("json: {e}"))
    }
}
