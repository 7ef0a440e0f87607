use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("AU {index} ({name}) has no positive samples; its class weight is undefined")]
    DegenerateClass { index: usize, name: String },

    #[error("every label in the batch is invalid; the loss is undefined")]
    EmptyLoss,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
