use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate subject id `{0}`")]
    DuplicateId(String),

    #[error("covariate `{covariate}`: unknown level `{token}`")]
    UnknownLevel { covariate: String, token: String },

    #[error("unclassifiable activities: {0:?}")]
    UnclassifiedActivity(Vec<String>),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid tree: {0}")]
    Tree(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("missing outcome `{outcome}` for units {units:?}")]
    MissingOutcome { outcome: String, units: Vec<String> },

    #[error("non-monotone randomization p-value: {0}")]
    NonMonotone(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
