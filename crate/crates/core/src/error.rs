use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent does not match what an operation requires.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file or directory entry could not be read or written.
    #[error("i/o error on {entry}: {detail}")]
    Io { entry: String, detail: String },

    /// Optimization produced non-finite losses or parameters.
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn dimension(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn io(entry: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Error::Io {
            entry: entry.into(),
            detail: detail.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
