use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` maps to CLI exit code 2, everything else to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed dataset or checkpoint file.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    /// Bound evaluated outside its stated parameter regime.
    #[error("regime error: {0}")]
    Regime(String),

    #[error("episode {index} failed: {source}")]
    Episode {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn in_episode(self, index: usize) -> Self {
        Error::Episode {
            index,
            source: Box::new(self),
        }
    }

    /// Whether the root cause is a configuration problem (exit code 2),
    /// looking through episode tags.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Episode { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
