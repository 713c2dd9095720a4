use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data has {len} elements but shape {shape:?} needs {expected}")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("gradient output must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("output is not attached to a differentiation graph")]
    Detached,
    #[error("tensors belong to different differentiation graphs")]
    GraphMismatch,
    #[error("tensor #{0} in `wrt` is not reachable from the output")]
    Unreachable(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("update kind mismatch: expected {expected}, got {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("total sample count is zero")]
    ZeroSamples,
    #[error("cosine distance undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("sparsity mask selects no coordinates")]
    EmptyMask,
    #[error("{0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
