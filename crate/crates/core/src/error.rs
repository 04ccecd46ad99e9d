use thiserror::Error;

/// Errors raised by configuration checks, the engines and the oracles.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// One or more configuration invariants do not hold.
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("config has not been validated (call AttentionConfig::validate first)")]
    NotValidated,

    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("empty attention row at head {head}, token {token}")]
    EmptyAttentionRow { head: usize, token: usize },

    #[error("malformed selection: {0}")]
    MalformedSelection(String),

    #[error("output buffer overflow in region (head {head}, block {block}): slot {slot} >= capacity {capacity}")]
    BufferOverflow {
        head: usize,
        block: usize,
        slot: usize,
        capacity: usize,
    },

    #[error("missing buffer slot for token {token} in block {block} (kv head {kv_head})")]
    MissingSlot {
        kv_head: usize,
        block: usize,
        token: usize,
    },

    #[error("cost model requires uniform head dims, got d_K={d_k}, d_V={d_v}")]
    NonUniformHeadDim { d_k: usize, d_v: usize },

    #[error("config file: {0}")]
    ConfigFile(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
