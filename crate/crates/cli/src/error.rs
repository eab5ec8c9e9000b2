use nvstrain_core::Error;

/// Command failures, each with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numerical(_) => 4,
        }
    }

    /// A library error raised while interpreting configuration.
    pub fn config(e: Error) -> Self {
        match e {
            Error::Numerical(m) => Self::Numerical(m),
            other => Self::Config(other.to_string()),
        }
    }

    /// A library error raised while reading or processing data.
    pub fn data(e: Error) -> Self {
        match e {
            Error::Numerical(m) => Self::Numerical(m),
            other => Self::Data(other.to_string()),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}
