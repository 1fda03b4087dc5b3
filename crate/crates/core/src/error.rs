use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while decoding the binary tensor, checkpoint and PGM formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unsupported rank {0} (only 4-d tensors are stored)")]
    Rank(u32),
    #[error("truncated file: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("dims {0:?} overflow the addressable element count")]
    DimOverflow([u32; 4]),
    #[error("entry name is not valid UTF-8")]
    Utf8,
    #[error("trailing bytes after the last record")]
    Trailing,
    #[error("netpbm: {0}")]
    Pgm(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(
        "crop window out of bounds on the {axis} axis: offset {offset} + extent {extent} > {input}"
    )]
    CropBounds {
        axis: &'static str,
        offset: usize,
        extent: usize,
        input: usize,
    },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("node `{node}`: {msg}")]
    Node { node: String, msg: String },
    #[error("graph: {0}")]
    Graph(String),
    #[error("unsupported topology: {0}")]
    Topology(String),
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("invalid label: {0}")]
    Label(String),
    #[error("duplicate checkpoint entry `{0}`")]
    DuplicateName(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("loss diverged (non-finite) at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("nothing evaluated: confusion matrix is empty")]
    EmptyConfusion,
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn node(node: &str, msg: impl Into<String>) -> Self {
        Error::Node {
            node: node.to_string(),
            msg: msg.into(),
        }
    }

    /// Attach a file path to an error.
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
