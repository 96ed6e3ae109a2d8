use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("buffer is empty")]
    EmptyBuffer,

    #[error("invalid action {action} (action space has {n_actions} actions)")]
    Action { action: usize, n_actions: usize },

    #[error("all sampled pairs were degenerate (|x - y| < 1e-9)")]
    DegenerateSample,

    #[error("no kernel support at query (effective sample size is zero)")]
    NoSupport,

    #[error("insufficient data: need at least {needed} transitions, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error on `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
