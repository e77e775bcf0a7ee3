use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("batchnorm needs at least two elements per channel in train mode, got {0}")]
    DegenerateVariance(usize),

    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },

    #[error("target value {0} is not 0 or 1")]
    NonBinaryTarget(f64),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("{0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("weight file magic mismatch: expected \"TIMW\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported weight file version {0}")]
    BadVersion(u32),

    #[error("weight file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("weight file malformed: {0}")]
    MalformedWeights(String),

    #[error("shape conflict for tensor `{name}`: file has {file:?}, model expects {model:?}")]
    ShapeConflict {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("tensor `{0}` missing from weight file")]
    MissingTensor(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
