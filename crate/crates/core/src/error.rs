use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("token id {id} out of range (vocabulary width {width})")]
    TokenOutOfRange { id: usize, width: usize },

    #[error("alignment length {t} is shorter than the minimum {min} required by the target")]
    Infeasible { t: usize, min: usize },

    #[error("enumeration of {candidates} alignments exceeds the configured cap of {cap}")]
    EnumerationCap { candidates: f64, cap: u64 },

    #[error("lattice row {row} is not normalized (logsumexp = {lse})")]
    UnnormalizedLattice { row: usize, lse: f64 },

    #[error("config mismatch in field {field}: {left} vs {right}")]
    ConfigMismatch {
        field: &'static str,
        left: String,
        right: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("unknown config key '{0}'")]
    UnknownKey(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("bad file format in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable code printed by the command-line tool.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Invalid(_) => "E_INVALID",
            Error::TokenOutOfRange { .. } => "E_TOKEN",
            Error::Infeasible { .. } => "E_INFEASIBLE",
            Error::EnumerationCap { .. } => "E_CAP",
            Error::UnnormalizedLattice { .. } => "E_LATTICE",
            Error::ConfigMismatch { .. } => "E_CONFIG_MISMATCH",
            Error::Config(_) => "E_CONFIG",
            Error::UnknownKey(_) => "E_UNKNOWN_KEY",
            Error::MissingArtifact(_) => "E_MISSING",
            Error::Format { .. } => "E_FORMAT",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Io { .. } => "E_IO",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
