use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: String, shapes: Vec<Vec<usize>> },

    #[error("unknown primitive `{0}`")]
    UnknownOp(String),

    #[error("{op}: {msg}")]
    InvalidArgument { op: String, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function returned different values on identical inputs ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite loss at epoch {epoch}, step {step}: {components}")]
    NonFiniteLoss {
        epoch: u64,
        step: usize,
        components: String,
    },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {msg} (at byte offset {offset})")]
    Checkpoint { msg: String, offset: usize },

    #[error("checkpoint config digest {found} does not match current config {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("run directory {} is locked; remove {} if no other run is using it", .0.display(), .0.join(".lock").display())]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &str, shapes: &[&[usize]]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn invalid(op: &str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op: op.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}
