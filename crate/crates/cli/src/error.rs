use nestor_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_COMPAT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// A failure with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
#[error("{msg}")]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn new(code: i32, msg: impl Into<String>) -> Self {
        CliError { code, msg: msg.into() }
    }

    pub fn config(key: impl AsRef<str>, msg: impl std::fmt::Display) -> Self {
        CliError::new(EXIT_CONFIG, format!("config error at `{}`: {msg}", key.as_ref()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => EXIT_CONFIG,
            Error::UnknownLabels(_) | Error::Checkpoint(_) => EXIT_COMPAT,
            Error::NonFinite(_) | Error::Shape { .. } => EXIT_NUMERIC,
            Error::LevelTooShort { .. }
            | Error::EmptyInput(_)
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::NoSuchLevel { .. }
            | Error::File { .. }
            | Error::Io(_)
            | Error::Json(_) => EXIT_DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(EXIT_DATA, e.to_string())
    }
}
