use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] otcr::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Core(otcr::Error::InvalidConfig { .. }) => "config",
            CliError::Usage(_) => "usage",
            CliError::Core(otcr::Error::Checkpoint(_)) => "checkpoint",
            CliError::Core(otcr::Error::DimensionMismatch { .. }) => "dimension",
            CliError::Core(otcr::Error::Parse { .. } | otcr::Error::Csv(_)) => "data",
            CliError::Core(_) => "runtime",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    /// Machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Config { field, .. } | CliError::Core(otcr::Error::InvalidConfig { field, .. }) => {
                body["field"] = json!(field);
            }
            _ => {}
        }
        json!({ "error": body })
    }
}
