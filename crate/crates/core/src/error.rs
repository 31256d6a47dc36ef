use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,
    #[error("row {row} has {found} entries, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("missing token {0:?} is also used as an alphabet symbol")]
    MissingTokenCollision(String),
    #[error("row {row}, column {col}: symbol {token:?} is not in the alphabet")]
    UnknownSymbol {
        row: usize,
        col: usize,
        token: String,
    },
    #[error("alphabet needs at least 2 distinct symbols, found {0}")]
    AlphabetTooSmall(usize),
    #[error("duplicate alphabet symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("multi-character token {0:?} requires a delimiter")]
    TokenNeedsDelimiter(String),
    #[error("column {0} has no observed entries")]
    AllMissingColumn(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("span {start}..{end} has no observed entries")]
    NoObservedEntries { start: usize, end: usize },
    #[error("restart {restart} produced a non-finite objective")]
    NonFiniteObjective { restart: usize },
    #[error("negative count {0} in marginal likelihood")]
    NegativeCount(f64),
    #[error("fold {fold} leaves no observed training entries in span {start}..{end}")]
    DegenerateFold {
        fold: usize,
        start: usize,
        end: usize,
    },
    #[error("score table has no entry for candidate (s={start}, l={length}, c={cardinality})")]
    MissingScore {
        start: usize,
        length: usize,
        cardinality: usize,
    },
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
    #[error("tag enumeration needs {needed} configurations, cap is {cap}; use a smaller budget")]
    TooManyConfigurations { needed: u128, cap: u128 },
    #[error("sign test needs at least one non-tied pair")]
    AllTies,
    #[error("malformed {what} at line {line}: {reason}")]
    Malformed {
        what: &'static str,
        line: usize,
        reason: String,
    },
    #[error("model and data disagree: {0}")]
    Mismatch(String),
    #[error("json: {0}")]
    Json(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
