use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("degenerate input to {op}: {reason}")]
    Degenerate { op: &'static str, reason: String },

    #[error("cache mismatch: layer `{layer}` received a cache produced by `{cache}`")]
    StaleCache { layer: String, cache: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("constant feature `{0}` cannot be min-max scaled")]
    ConstantFeature(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("nothing to prune: {0}")]
    NothingPrunable(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("access to week {week} denied; only weeks < {visible} are visible")]
    FutureAccess { week: usize, visible: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the input data rather than by the caller or
    /// by numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InsufficientData(_)
                | Error::ConstantFeature(_)
                | Error::Io(_)
        )
    }

    pub fn is_numerical_abort(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
