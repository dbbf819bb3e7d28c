use std::path::Path;

/// Command failure with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Domain(#[from] pima::Error),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            // Unreadable or malformed files surface from the library too.
            CliError::Domain(
                pima::Error::Io { .. }
                | pima::Error::Idx { .. }
                | pima::Error::Corrupt { .. }
                | pima::Error::VersionMismatch { .. }
                | pima::Error::Serde(_),
            ) => 2,
            CliError::Domain(_) | CliError::Verification(_) => 1,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Domain(e.into())
    }
}
