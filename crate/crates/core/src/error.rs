use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("parameter node {0} is not connected to the loss")]
    Connectivity(usize),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("missing-state policy error: {0}")]
    Policy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("discretization step must be positive, got {0}")]
    Discretization(f64),

    #[error("training diverged at step {step}: loss {loss}")]
    Training { step: usize, loss: f64 },

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("checkpoint error in tensor `{tensor}`: {reason}")]
    Checkpoint { tensor: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category name, used by the CLI to report failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Label { .. } => "label",
            Error::Connectivity(_) => "connectivity",
            Error::Capacity(_) => "capacity",
            Error::Policy(_) => "policy",
            Error::Config(_) => "config",
            Error::Discretization(_) => "discretization",
            Error::Training { .. } => "training",
            Error::Accounting(_) => "accounting",
            Error::Ingestion(_) => "ingestion",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
