use std::fmt;

/// Command failures, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(flatformer::Error),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_IO: i32 = 5;

impl CliError {
    pub fn from_config(e: flatformer::Error) -> Self {
        match e {
            flatformer::Error::Config(m) => CliError::Usage(m),
            other => CliError::Core(other),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use flatformer::Error::*;
        match self {
            CliError::Usage(_) | CliError::Core(Config(_)) => EXIT_USAGE,
            CliError::Core(Data(_) | Json(_) | Csv(_)) => EXIT_DATA,
            CliError::Core(Divergence(_)) => EXIT_DIVERGENCE,
            CliError::Core(Io { .. }) => EXIT_IO,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<flatformer::Error> for CliError {
    fn from(e: flatformer::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(flatformer::Error::io(path, e))
}
