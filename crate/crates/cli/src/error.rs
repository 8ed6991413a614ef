use std::fmt;
use std::path::Path;

use flowmap_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Config(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    pub fn missing(path: &Path) -> Self {
        CliError::Missing(format!("missing input: {}", path.display()))
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(m) | CliError::Numeric(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged { .. } | CoreError::Numeric { .. } | CoreError::Singular(_) => {
                CliError::Numeric(e.to_string())
            }
            CoreError::Format(_) => CliError::Missing(e.to_string()),
            CoreError::Config(m) => CliError::Config(m),
            CoreError::Shape { .. } | CoreError::Domain(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
