use std::fmt;

use serde_json::json;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Malformed invocation (exit 2).
    Usage(String),
    /// Invalid configuration; `field` is a dotted path (exit 3).
    Config { field: String, message: String },
    /// Everything else: I/O, malformed data, numerical failure (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config { .. } => 3,
            CliError::Runtime(_) => 1,
        }
    }

    /// Single-line JSON description for stderr.
    pub fn to_json_line(&self) -> String {
        let v = match self {
            CliError::Usage(m) => json!({ "error": "usage", "message": m }),
            CliError::Config { field, message } => json!({ "error": "config", "field": field, "message": message }),
            CliError::Runtime(m) => json!({ "error": "runtime", "message": m }),
        };
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Config { field, message } => write!(f, "config field `{field}`: {message}"),
        }
    }
}

impl From<gcrl_core::Error> for CliError {
    fn from(e: gcrl_core::Error) -> Self {
        match e {
            gcrl_core::Error::Config { field, message } => CliError::Config { field, message },
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
