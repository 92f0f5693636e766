use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error(
        "degenerate gamma at layer {layer}: every activation is zero over the dataset; \
         retrain the source network or enable the epsilon floor"
    )]
    DegenerateGamma { layer: usize },

    #[error("enumeration over {width} stochastic units exceeds the cap of {cap}")]
    EnumTooWide { width: usize, cap: usize },

    #[error("forward mode {mode} not admissible: {reason}")]
    ModeNotAdmissible { mode: &'static str, reason: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
