use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("solver diverged: line search exceeded {backtracks} backtracks (L = {lipschitz:e})")]
    Divergence { backtracks: usize, lipschitz: f64 },

    #[error("inference failed at layer {layer}, group {group}: {source}")]
    Inference {
        layer: usize,
        group: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training failed at layer {layer}, timestep {timestep}: {source}")]
    Training {
        layer: usize,
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("topology error at layer boundary {boundary}: {message}")]
    Topology { boundary: usize, message: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("state error: {0}")]
    State(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported model version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dim(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

pub(crate) fn ensure_shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::dim(format!(
            "{what}: shape {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        )));
    }
    Ok(())
}
