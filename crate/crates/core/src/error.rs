use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RssError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, RssError>;

impl From<std::io::Error> for RssError {
    fn from(e: std::io::Error) -> Self {
        RssError::Io(e.to_string())
    }
}
