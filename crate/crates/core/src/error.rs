use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or combination of values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates an operation's precondition (shape, range, finiteness).
    #[error("input error: {0}")]
    Input(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not follow the expected container layout.
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Training produced a non-finite loss; diagnostics were written to `snapshot`.
    #[error("numerical failure: {msg} (diagnostics: {})", snapshot.display())]
    Numerical { msg: String, snapshot: PathBuf },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for this error class: 1 I/O, 2 configuration, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 1,
            Error::Config(_) | Error::Input(_) => 2,
            Error::Numerical { .. } => 3,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use input_err;
