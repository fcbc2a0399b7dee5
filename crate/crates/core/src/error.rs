use thiserror::Error;

/// Failure classes shared by every module. The CLI maps each variant to a
/// distinct process exit code.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("resource limit exceeded: {what} needs {needed}, limit is {limit}")]
    Resource {
        what: String,
        needed: usize,
        limit: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn domain(msg: impl Into<String>) -> Self {
        LabError::Domain(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        LabError::Numeric(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 config, 3 numeric, 4 resource budget, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config { .. } | LabError::Domain(_) => 2,
            LabError::Numeric(_) => 3,
            LabError::Resource { .. } => 4,
            LabError::Io(_) | LabError::Json(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
