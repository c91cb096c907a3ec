use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("gather index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("max pool over an empty time axis")]
    EmptyTimeAxis,

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("node id {0} does not belong to this tape (run forward first)")]
    UnknownNode(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("model and encoding do not match: {0}")]
    EncodingMismatch(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite parameter values after epoch {epoch}")]
    NonFiniteParameters { epoch: usize },

    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),

    #[error("unreadable file {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("model format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt vocabulary file: {0}")]
    CorruptVocabulary(String),

    #[error("infeasible synthetic corpus parameters: {0}")]
    InfeasibleParameters(String),

    #[error("token sequence contains only padding")]
    AllPadSequence,

    #[error("black-box scorer returned a non-finite value at coordinate {0}")]
    NonFiniteScore(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}
