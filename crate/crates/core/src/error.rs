use std::path::PathBuf;

use auscult_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    ManifestLine { line: usize, msg: String },
    #[error("duplicate recording_id `{0}`")]
    DuplicateId(String),
    #[error("recording `{id}`: interval ({start_s}, {end_s}) is not ordered")]
    IntervalOrder { id: String, start_s: f64, end_s: f64 },
    #[error("recording `{id}`: unknown label {label}")]
    UnknownLabel { id: String, label: i64 },
    #[error("audio `{path}`: {msg}")]
    Audio { path: PathBuf, msg: String },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid {
        op,
        msg: msg.into(),
    })
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
