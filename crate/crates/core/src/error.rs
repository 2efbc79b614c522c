use std::path::Path;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error for I/O, manifests, configuration and pipeline control.
/// Stage-specific parse and validation failures have their own types and
/// are converted here when they escape a stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
    #[error(transparent)]
    Backend(#[from] crate::backends::BackendError),
    #[error(transparent)]
    Acf(#[from] crate::acf::AcfError),
    #[error(transparent)]
    Curriculum(#[from] crate::curriculum::CurriculumError),
    #[error(transparent)]
    Grpo(#[from] crate::grpo::GrpoError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("stage `{stage}` interrupted; last durable manifest: {checkpoint}")]
    Interrupted { stage: String, checkpoint: String },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
