use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("node {node} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in input to {0}")]
    NonFinite(&'static str),

    #[error("backward needs a 1x1 scalar, got {0}x{1}")]
    NonScalar(usize, usize),

    #[error("tape already consumed by an earlier backward pass")]
    TapeConsumed,

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("evaluation edge set is empty")]
    EmptyEdgeSet,

    #[error("duplicate edge ({0}, {1}) in evaluation set")]
    DuplicateEdge(usize, usize),

    #[error("tuning subset and test subset overlap at node {0}")]
    SubsetOverlap(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for bad inputs or configuration, false for failures during
    /// computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::MissingFile(_)
            | Error::Parse { .. }
            | Error::NodeOutOfRange { .. }
            | Error::InvalidParam(_)
            | Error::Shape { .. }
            | Error::EmptyEdgeSet
            | Error::DuplicateEdge(..)
            | Error::SubsetOverlap(_)
            | Error::Json(_) => true,
            Error::Io { .. }
            | Error::NonFinite(_)
            | Error::NonScalar(..)
            | Error::TapeConsumed
            | Error::Diverged { .. }
            | Error::UndefinedCorrelation(_) => false,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
