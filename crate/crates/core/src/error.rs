use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{what} = {value} is outside the valid range {range}")]
    Range {
        what: &'static str,
        value: i64,
        range: String,
    },

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint tensor `{tensor}` has shape {got:?}, model expects {expected:?}")]
    TensorShape {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint is truncated: {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool and the C ABI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Range { .. } | Error::Contract(_) | Error::Shape { .. } => 2,
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::VersionMismatch { .. }
            | Error::TensorShape { .. }
            | Error::Truncated(_)
            | Error::Malformed(_) => 3,
            Error::NonFinite { .. } | Error::Tensor(_) => 4,
        }
    }
}
