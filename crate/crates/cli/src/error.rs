use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("cannot resolve dataset `{}`: {reason}", path.display())]
    Resolve { path: PathBuf, reason: String },

    #[error("output directory `{}` is not empty; pass --force to write into it", .0.display())]
    OutputExists(PathBuf),

    #[error(transparent)]
    Core(#[from] stda_core::Error),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Resolve { .. } => "resolve",
            CliError::OutputExists(_) => "output_exists",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
        }
    }

    /// 2 for command-line misuse, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One-line `{"error": {"kind", "message"}}` document.
    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
