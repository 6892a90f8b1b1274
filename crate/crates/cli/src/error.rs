use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Data(_) => 1,
            Self::Io(_) => 2,
            Self::Divergence(_) => 3,
            Self::Version(_) => 4,
        }
    }
}

impl From<aqua_detector::DetectorError> for CliError {
    fn from(e: aqua_detector::DetectorError) -> Self {
        use aqua_detector::DetectorError as E;
        match e {
            E::Divergence { .. } | E::NonFinite { .. } => Self::Divergence(e.to_string()),
            E::VersionMismatch { .. } => Self::Version(e.to_string()),
            E::Io(_) => Self::Io(e.to_string()),
            E::Config(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<aqua_data::DataError> for CliError {
    fn from(e: aqua_data::DataError) -> Self {
        match e {
            aqua_data::DataError::Io { .. } => Self::Io(e.to_string()),
            aqua_data::DataError::PresetCount(_) | aqua_data::DataError::Spec(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<aqua_core::Error> for CliError {
    fn from(e: aqua_core::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
