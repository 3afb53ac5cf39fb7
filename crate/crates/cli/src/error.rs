use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Schema(String),
    #[error("malformed tensor container: {0}")]
    Container(String),
    #[error("missing checkpoint {0}; run `train` first")]
    MissingCheckpoint(PathBuf),
    #[error("metric {0} is not finite")]
    NonFiniteMetric(&'static str),
    #[error(transparent)]
    Core(#[from] equireg_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
