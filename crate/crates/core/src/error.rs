//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: expected length {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid exponential-family point: eta2 must be strictly negative (dim {0})")]
    InvalidFamily(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("natural-gradient direction undefined: gradient is zero")]
    ZeroGradient,

    #[error("waste-reduction ratio undefined: mean expert waste is zero")]
    ZeroWaste,

    #[error("no valid pairs left after skipping zero-norm vectors")]
    NoValidPairs,

    #[error("expert with shuffle seed {seed} failed: {source}")]
    ExpertFailed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid index {index} into {len} elements")]
    BadIndex { index: usize, len: usize },

    #[error("missing bootstrap value at frame {0}")]
    MissingBootstrap(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("snapshot decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
