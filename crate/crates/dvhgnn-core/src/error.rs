use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the tensor engine, graph
/// construction, convolution, and model I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("operands recorded on different tapes")]
    TapeMismatch,

    #[error("backward requires a scalar loss on a tape, got shape {got}")]
    BackwardOnNonScalar { got: String },

    #[error("{op}: empty region")]
    EmptyRegion { op: &'static str },

    #[error("dilated aggregation denominator 1 + |e|*w_r = {denom:e} is singular")]
    SingularWeight { denom: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("{what}: parse error at line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("tensor {name} missing from manifest")]
    MissingTensor { name: String },

    #[error("blob truncated while reading tensor {name}")]
    TruncatedBlob { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
