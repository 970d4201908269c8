use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the segmentation framework.
///
/// The variants are grouped by the kind of failure so front-ends can map
/// them onto exit codes with [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("data validation failed: {0}")]
    Data(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero variance inside normalization mask")]
    ZeroVariance,

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml decode: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml encode: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

/// Coarse failure category, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
    Other,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) | Error::Checkpoint(_) => {
                ErrorKind::Config
            }
            Error::UnknownModality(_)
            | Error::Data(_)
            | Error::MissingFile(_)
            | Error::Shape(_)
            | Error::ZeroVariance
            | Error::NonFinite(_)
            | Error::EmptyMask(_)
            | Error::Nifti(_) => ErrorKind::Data,
            Error::Divergence { .. } => ErrorKind::Divergence,
            Error::Io(_) | Error::Json(_) => ErrorKind::Other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
