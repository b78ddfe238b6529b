use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unknown {kind} `{name}`; valid names: {}", valid.join(", "))]
    Lookup {
        kind: &'static str,
        name: String,
        valid: Vec<String>,
    },

    #[error("sequence length {len} exceeds max_positions {max}")]
    Length { len: usize, max: usize },

    #[error("cannot copy tensors between models: {}", mismatched.join("; "))]
    Copy { mismatched: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure in stage `{stage}` at step {step}: {detail}")]
    NonFinite {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
