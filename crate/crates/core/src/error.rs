use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0} contains no interactions")]
    EmptyDataset(PathBuf),

    #[error("index {index} out of range for {what} (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix factorization diverged at epoch {epoch} (loss is not finite); try a smaller learning rate")]
    Diverged { epoch: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("constraint gradient is degenerate (b'H^-1 b = {s:e}) while the constraint is violated (c = {c})")]
    DegenerateConstraint { s: f64, c: f64 },

    #[error("critic fit produced a non-finite loss (initial loss {initial}, batch size {batch})")]
    CriticDiverged { initial: f64, batch: usize },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("unknown user {0}")]
    UnknownUser(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
