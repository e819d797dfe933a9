use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sequence of length {len} exceeds model max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("grpo step failed: {excluded} of {total} tokens had non-finite ratios")]
    ExcludedTokens { excluded: usize, total: usize },
    #[error("rl batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
