use thiserror::Error;

/// Errors raised by the model, data pipeline and training engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("raster {path}: {message}")]
    Raster { path: String, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
    Other,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorKind::Config,
            Error::Data(_) | Error::Raster { .. } | Error::Json(_) | Error::Io(_) => ErrorKind::Data,
            Error::Divergence { .. } => ErrorKind::Divergence,
            Error::Stage { source, .. } => source.kind(),
            Error::Shape(_) | Error::Tensor(_) | Error::Checkpoint(_) => ErrorKind::Other,
        }
    }

    pub(crate) fn in_stage(self, stage: usize) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
