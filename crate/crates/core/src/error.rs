use std::path::PathBuf;

/// Errors raised by the tracing pipeline and its file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid seed: {0}")]
    InvalidSeed(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("degenerate patch: no endpoints on the patch boundary")]
    DegeneratePatch,

    #[error("new instance mask is disconnected from the existing tree")]
    Disconnected,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
