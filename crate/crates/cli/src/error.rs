use skillmdp::runtime::RuntimeError;
use skillmdp::BackendError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("backend cannot do this: {0}")]
    Capability(String),
}

impl CliError {
    /// 0 success, 1 validation, 2 runtime, 3 backend capability.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Capability(_) => 3,
        }
    }

    pub fn io(what: &str, path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Runtime(format!("{what} {}: {err}", path.display()))
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Capability(m) => CliError::Capability(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Episode {
                source: BackendError::Capability(m),
                ..
            } => CliError::Capability(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
