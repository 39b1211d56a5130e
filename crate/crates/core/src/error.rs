use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that do not line up for an operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside an operation's mathematical domain (e.g. log of a
    /// non-positive value).
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// An out-of-range parameter (dropout rate, thresholds, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Configuration that violates a structural invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A broken API contract (non-scalar backward root, missing grad, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Anchor-grid construction produced a degenerate box.
    #[error("construction error: {0}")]
    Construction(String),

    /// Min-max scaler fit on a constant channel.
    #[error("fit error: offset channel {channel} is constant (value {value})")]
    ScalerFit { channel: usize, value: f64 },

    /// Malformed dataset or checkpoint content.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
