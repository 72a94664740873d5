use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("price {price} outside category range [{min}, {max}]")]
    PriceOutOfRange { price: f64, min: f64, max: f64 },

    #[error("invalid interaction at line {line}: {msg}")]
    BadInteraction { line: usize, msg: String },

    #[error("no sessions left after filtering")]
    EmptyCorpus,

    #[error("need at least 3 sessions to split, got {0}")]
    TooFewSessions(usize),

    #[error("{path}: row count {got} ≠ {expected}")]
    RowCount {
        path: PathBuf,
        got: usize,
        expected: usize,
    },

    #[error("{path}: row {row}: {msg}")]
    BadRow {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    BadFile { path: PathBuf, msg: String },

    #[error("unknown item id {0}")]
    UnknownItem(u32),

    #[error("unknown category id {0}")]
    UnknownCategory(u32),

    #[error("{what} index {index} out of range (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("contrastive batch needs at least 2 items, got {0}")]
    ContrastiveBatch(usize),

    #[error("non-finite loss in epoch {epoch} batch {batch}; worst gradient in `{param}`")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param: String,
    },

    #[error(transparent)]
    Tensor(#[from] diffcore::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
