use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {0} is missing; run generate-data first")]
    MissingDataset(PathBuf),
    #[error("checkpoint {0} is missing; run train first")]
    MissingCheckpoint(PathBuf),
    #[error("schema mismatch in {path}: {message}")]
    SchemaMismatch { path: PathBuf, message: String },
    #[error("failed predicates: {}", .0.join(", "))]
    PredicateFailed(Vec<String>),
    #[error(transparent)]
    Synth(#[from] covae_core::synthdata::SynthError),
    #[error(transparent)]
    Model(#[from] covae_core::covae::CovaeError),
    #[error(transparent)]
    Eval(#[from] covae_core::eval::EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
