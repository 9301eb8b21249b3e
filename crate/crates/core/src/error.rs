use std::path::PathBuf;

/// Errors produced anywhere in the testbed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("singular matrix in damped pseudo-inverse")]
    Singular,

    #[error("inverse kinematics did not converge (residual {residual:.3e})")]
    IkFailure { residual: f64 },

    #[error("plant error: {0}")]
    Plant(String),

    #[error("residual command does not match mode {mode}")]
    Mode { mode: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
