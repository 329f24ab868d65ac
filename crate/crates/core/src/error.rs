use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A receptive field does not fit the concrete input it is applied to.
    #[error("receptive field {rf} exceeds input {height}x{width}")]
    RfConstraint {
        rf: usize,
        height: usize,
        width: usize,
    },

    #[error("location ({row}, {col}) is outside the {rows}x{cols} grid")]
    OutOfGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("box {0} does not lie inside the image")]
    BoxOutOfBounds(String),

    #[error("batchnorm in inference mode needs running statistics")]
    MissingStatistics,

    #[error("backward called without a recorded forward pass: {0}")]
    NoForward(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("threshold schedule has {got} values, {needed} needed")]
    Thresholds { needed: usize, got: usize },

    #[error("budget {budget} is infeasible; achievable range is [{min}, {max}]")]
    InfeasibleBudget { budget: f64, min: f64, max: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
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

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
