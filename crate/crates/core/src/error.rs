use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid block spec: {0}")]
    Spec(String),

    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("graph error at node `{node}`: {msg}")]
    Graph { node: String, msg: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("label {value} at (row {row}, col {col}) is not below {num_classes}")]
    Label {
        value: u32,
        row: usize,
        col: usize,
        num_classes: usize,
    },

    #[error("training diverged at iteration {iteration} (last finite loss {last_finite_loss})")]
    Diverged { iteration: usize, last_finite_loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
