use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },

    #[error("layer {layer}: residual source {source_layer} has an incompatible shape ({reason})")]
    DanglingResidual {
        layer: usize,
        source_layer: usize,
        reason: String,
    },

    #[error("cannot convert layer {layer}: {reason}")]
    Conversion { layer: usize, reason: String },

    #[error("missing gamma for layer {layer} channel {channel}")]
    MissingGamma { layer: usize, channel: usize },

    #[error("group {group} cannot reach {budget} bytes (minimum reachable {min_bytes})")]
    Infeasible {
        group: usize,
        budget: u64,
        min_bytes: u64,
    },

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid graph: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
