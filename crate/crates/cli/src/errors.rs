//! Error kinds reported in the machine-readable failure summary.

use std::fmt;
use std::path::Path;

use serde::Serialize;

#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing input: {}", self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn missing_input(path: impl AsRef<Path>) -> anyhow::Error {
    InputError(path.as_ref().display().to_string()).into()
}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    ConfigError(message.into()).into()
}

#[derive(Debug, Serialize)]
pub struct ErrorSummary {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub causes: Vec<String>,
}

impl ErrorSummary {
    pub fn from_error(err: &anyhow::Error) -> Self {
        let kind = if err.downcast_ref::<InputError>().is_some() {
            "missing-input"
        } else if err.downcast_ref::<ConfigError>().is_some() {
            "config"
        } else {
            "runtime"
        };
        ErrorSummary { kind, message: err.to_string(), causes: err.chain().skip(1).map(|c| c.to_string()).collect() }
    }

    pub fn usage(message: String) -> Self {
        ErrorSummary { kind: "usage", message, causes: Vec::new() }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind == "runtime" {
            1
        } else {
            2
        }
    }
}
