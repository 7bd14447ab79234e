use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("record sets differ; ids only in one side: {}", .0.join(", "))]
    IdMismatch(Vec<String>),

    #[error("degenerate evaluation: {0}")]
    Degenerate(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: u32, step: u64, detail: String },
}

impl Error {
    /// Process exit status for command-line use.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Format { .. } | Error::Contract(_) => 3,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Diverged { .. } => 4,
            Error::Checkpoint(_) => 5,
            Error::IdMismatch(_) => 6,
            Error::Degenerate(_) => 7,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
