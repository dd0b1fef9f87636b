use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} is empty or out of range for shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{what} index {index} out of range (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("vocabulary scheme mismatch: {0} vs {1}")]
    SchemeMismatch(&'static str, &'static str),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter manifests differ: {0}")]
    ManifestMismatch(String),
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
    #[error("generation policy selects multi-token words not routed through Tok: {0:?}")]
    Alignment(Vec<String>),
    #[error("parse error: {0}")]
    Parse(String),
}
