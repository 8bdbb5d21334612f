use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KevsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KevsError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid NIfTI file: {0}")]
    Nifti(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("invalid grid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid label schema: {0}")]
    Schema(String),

    #[error("label schema has no role `{0}`")]
    MissingRole(String),

    #[error("label {label} at voxel {index} is not present in the schema")]
    UnknownLabel { label: u32, index: usize },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate sample set: {0}")]
    DegenerateSamples(String),

    #[error("infeasible phantom specification: {0}")]
    InfeasiblePhantom(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KevsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KevsError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, KevsError::Io { .. })
    }
}
