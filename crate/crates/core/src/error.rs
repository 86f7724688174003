use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no valid foreground pixels (mask on and depth > 0)")]
    EmptyForeground,
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("ransac found no model with at least {needed} inliers")]
    NoConsensus { needed: usize },
    #[error("registration failed: only {correspondences} correspondences (need {needed})")]
    RegistrationFailed { correspondences: usize, needed: usize },
    #[error("initial silhouette does not overlap the target")]
    NoOverlap,
    #[error("mesh crosses the near plane ({near} m)")]
    BehindNearPlane { near: f64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("prior has {got} vertices, expected {expected} +/- {tolerance}")]
    VertexCount { expected: usize, tolerance: usize, got: usize },
    #[error("mesh is outside the canonical frame: bounding-box diagonal {diagonal}")]
    OutOfCanonicalBounds { diagonal: f64 },
    #[error("image format error: {0}")]
    Format(String),
    #[error("{path}: missing frame {index:06}")]
    MissingFrame { path: PathBuf, index: usize },
    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },
    #[error("scene spec error at frame {frame}: {msg}")]
    Scene { frame: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by malformed or out-of-contract input, as opposed
    /// to I/O failures and numerical procedures that ran but did not succeed.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_)
                | Error::Load { .. }
                | Error::Degenerate(_)
                | Error::NoConsensus { .. }
                | Error::RegistrationFailed { .. }
                | Error::NoOverlap
        )
    }
}
