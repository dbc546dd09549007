use std::path::PathBuf;

use icm_core::IcmError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{failed} of {attempted} solves failed (limit {:.0}%)", .limit * 100.0)]
    DatasetFailures { failed: usize, attempted: usize, limit: f64 },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] IcmError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 0 success, 1 usage, 2 numerical failure, 3 too many failed solves.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingArtifact(_) | CliError::Io { .. } => 1,
            CliError::DatasetFailures { .. } => 3,
            CliError::Core(e) => match e {
                IcmError::InvalidConfig(_)
                | IcmError::Format(_)
                | IcmError::Io(_)
                | IcmError::Json(_)
                | IcmError::UnknownSubsetRule(_)
                | IcmError::UnknownBoundarySet(_) => 1,
                _ => 2,
            },
        }
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
