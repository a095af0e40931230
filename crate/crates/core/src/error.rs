use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("sequence length {len} exceeds buffer of {max} positions")]
    Length { len: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("constraint violated between `{first}` and `{second}`: {msg}")]
    Constraint {
        first: &'static str,
        second: &'static str,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("checkpoint has bad magic tag")]
    Magic,

    #[error("unsupported checkpoint format version {0}")]
    Version(u32),

    #[error("checkpoint parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error("training diverged at step {step}: {msg} (last good checkpoint: {last_good:?})")]
    Diverged {
        step: u64,
        msg: String,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
