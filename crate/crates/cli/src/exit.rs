use std::fmt;

use ziplab::Error;

/// A failed command and the process exit code it maps to.
///
/// | code | meaning              |
/// |------|----------------------|
/// | 2    | I/O failure          |
/// | 3    | missing prerequisite |
/// | 4    | bad argument         |
/// | 5    | empty input          |
/// | 1    | anything else        |
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn bad_argument(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }

    pub fn empty(message: impl Into<String>) -> Self {
        Self { code: 5, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => 2,
            Error::InvalidArgument(_) | Error::UnknownAttribute(_) | Error::UnknownToken(_) => 4,
            Error::Parse(_) => 4,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}
