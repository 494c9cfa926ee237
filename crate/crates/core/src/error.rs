use std::io;

/// Errors produced by the library.
///
/// The variants map onto the failure classes the CLI reports with distinct
/// exit codes: configuration problems, malformed data, and runtime misuse.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(io::Error),
    #[error("json error: {0}")]
    Json(serde_json::Error),
}

// No `source`: the message already carries the inner error.
impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    /// True for errors caused by the user's configuration rather than data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }

    /// True for errors caused by malformed or missing input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Validation(_) | Error::Io(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid_arg {
    ($($arg:tt)*) => { $crate::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use invalid_arg;
