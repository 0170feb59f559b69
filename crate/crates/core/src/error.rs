use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QemError>;

#[derive(Debug, Error)]
pub enum QemError {
    #[error("subregister {subregister}: index {index} out of range for dimension {dim}")]
    IndexOutOfRange {
        subregister: usize,
        index: usize,
        dim: usize,
    },
    #[error("no subregister {0} in layout")]
    NoSuchSubregister(usize),
    #[error("subregister {0} listed more than once")]
    DuplicateSubregister(usize),
    #[error("invalid register layout: {0}")]
    InvalidLayout(String),
    #[error("state dimension {dim} exceeds cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("permutation table is not a bijection on 0..{0}")]
    NotBijective(usize),
    #[error("zero-norm projection ({0})")]
    ZeroNorm(&'static str),
    #[error("invalid phase map: {0}")]
    InvalidPhaseMap(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("data required: {what}; expected {format}")]
    DataRequired { what: String, format: String },
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
