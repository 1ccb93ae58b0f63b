use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("accuracy error: {0}")]
    Accuracy(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable kind, used in JSON error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Model(_) => "model",
            Error::Numerical(_) => "numerical",
            Error::Range(_) => "range",
            Error::Accuracy(_) => "accuracy",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
