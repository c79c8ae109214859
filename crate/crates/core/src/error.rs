use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (bad shape, rank, timestep).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value failed validation. `field` is the dotted path of the offending key.
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    /// Effective rank requested for an all-zero spectrum.
    #[error("effective rank is undefined for an all-zero spectrum")]
    UndefinedRank,

    /// NaN or infinite value produced during training or sampling.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
