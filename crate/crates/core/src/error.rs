use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variant names double as the machine-readable error kind printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("precision error: {0}")]
    Precision(String),
    #[error("rewire error: {0}")]
    Rewire(String),
    #[error("remap error: {0}")]
    Remap(String),
    #[error("build error: {0}")]
    Build(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("numerical error: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Consistency(_) => "consistency",
            Error::Precision(_) => "precision",
            Error::Rewire(_) => "rewire",
            Error::Remap(_) => "remap",
            Error::Build(_) => "build",
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Load(_) => "load",
            Error::NonFinite(_) => "nonfinite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
