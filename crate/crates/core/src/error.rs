use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("inverse DFT input is not conjugate-symmetric (imaginary residue {residue:.3e})")]
    SymmetryViolation { residue: f64 },

    #[error("matrix inversion failed (condition estimate {condition:.3e})")]
    Inversion { condition: f64 },

    #[error("matrix of size {rows}x{cols} exceeds the cap of {cap}")]
    SizeCap { rows: usize, cols: usize, cap: usize },

    #[error("SVD did not converge within {sweeps} sweeps")]
    NotConverged { sweeps: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("training error: {0}")]
    Training(String),

    #[error("spectrum construction error: {0}")]
    Construction(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("correlation error: {0}")]
    Correlation(String),

    #[error("pruning error: {0}")]
    Pruning(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{stage} stage failed: {source}")]
    Stage { stage: String, source: Box<Error> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NonFinite { .. }
                | Error::Inversion { .. }
                | Error::NotConverged { .. }
                | Error::Divergence { .. }
                | Error::SymmetryViolation { .. }
        )
    }

    /// The innermost error beneath any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
