use thiserror::Error;

/// Error type shared across the crate.
#[derive(Error, Debug)]
pub enum DecalError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl DecalError {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 missing artifact, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DecalError::Config(_) | DecalError::Vocab(_) | DecalError::Prompt(_) => 2,
            DecalError::Numeric(_) => 3,
            DecalError::MissingArtifact(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, DecalError>;
