use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("check suite failed: {0}")]
    Checks(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing input {0}; run the command that produces it first")]
    MissingInput(PathBuf),
    #[error(transparent)]
    Model(mfg_broker::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Checks(_) => 3,
            CliError::Io { .. } | CliError::MissingInput(_) => 4,
            CliError::Model(e) => match e {
                mfg_broker::Error::Validation(_)
                | mfg_broker::Error::InvalidInput(_)
                | mfg_broker::Error::GridMismatch(_) => 2,
                _ => 1,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<mfg_broker::Error> for CliError {
    fn from(e: mfg_broker::Error) -> Self {
        CliError::Model(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
