use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation file at `{path}`: {message}")]
    Syntax { path: String, message: String },
    #[error("{section}[{index}].{field}: {message}")]
    Record {
        section: &'static str,
        index: usize,
        field: &'static str,
        message: String,
    },
    #[error("png: {0}")]
    Png(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("expected exactly 7 domain presets, got {0}")]
    PresetCount(usize),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Core(#[from] aqua_core::Error),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(section: &'static str, index: usize, field: &'static str, message: impl Into<String>) -> Self {
        Self::Record {
            section,
            index,
            field,
            message: message.into(),
        }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
