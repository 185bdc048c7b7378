use std::path::PathBuf;

use thiserror::Error;

use crate::graph::FrameId;

/// Errors produced anywhere in the backend.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} is too close to pi for an unambiguous logarithm")]
    AngleNearPi { angle: f64 },

    #[error("inverse depth must be strictly positive, got {0}")]
    NonPositiveInverseDepth(f64),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("frame {0} has no outgoing edge carrying a mask")]
    NoIncidentEdges(FrameId),

    #[error("need at least {required} frames, got {actual}")]
    InsufficientFrames { required: usize, actual: usize },

    #[error("frame {0} already exists in the graph")]
    DuplicateFrame(FrameId),

    #[error("frame {0} does not exist in the graph")]
    UnknownFrame(FrameId),

    #[error("edge ({0}, {1}) is invalid: {2}")]
    InvalidEdge(FrameId, FrameId, &'static str),

    #[error("no valid pixels between frames {0} and {1}")]
    NoValidPixels(FrameId, FrameId),

    #[error("reduced pose system is not positive definite")]
    SingularSystem,

    #[error("solver diverged: cost increased on {0} consecutive steps")]
    Diverged(usize),

    #[error("state became non-finite in outer iteration {0}")]
    NonFinite(usize),

    #[error("the problem has no free frame to optimize")]
    NoFreeFrames,

    #[error("fixed frame {0} cannot be modified")]
    FixedFrame(FrameId),

    #[error("ground-truth flow for edge ({0}, {1}) is not available")]
    MissingGroundTruth(FrameId, FrameId),

    #[error("input is empty")]
    EmptyInput,

    #[error("need at least {required} associated poses, got {actual}")]
    TooFewCorrespondences { required: usize, actual: usize },

    #[error("degenerate scene configuration: {0}")]
    DegenerateConfig(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
