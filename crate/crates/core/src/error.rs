use std::path::PathBuf;

use thiserror::Error;

/// Spatial axis or channel axis named in a shape error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Channels,
    Dim(usize),
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Channels => write!(f, "channels"),
            Axis::Dim(d) => write!(f, "spatial dim {d}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op} along {axis}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        axis: Axis,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("noise extent mismatch at scale {scale}, dim {dim}: expected {expected}, got {actual}")]
    NoiseExtent {
        scale: usize,
        dim: usize,
        expected: usize,
        actual: usize,
    },
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("bad container {path:?}: {msg}")]
    Format { path: Option<PathBuf>, msg: String },
    #[error("non-finite loss at iteration {iteration} (direction {direction}, offset {offset}, noise origin {origin:?})")]
    NonFinite {
        iteration: usize,
        direction: usize,
        offset: i64,
        origin: [i64; 3],
        /// The offending single-slice volume, kept for a diagnostic dump.
        sample: Box<crate::tensor::Tensor4>,
    },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
