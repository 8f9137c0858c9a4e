use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("pose at ({x:.3}, {y:.3}, {z:.3}) lies inside an obstacle or outside the room")]
    PoseInsideObstacle { x: f64, y: f64, z: f64 },
    #[error("degenerate trajectory: {0}")]
    DegenerateLoop(String),
    #[error("need at least 2 poses, got {0}")]
    TooFewPoses(usize),
    #[error("path length {length:.4} m is shorter than node spacing {spacing:.4} m")]
    PathTooShort { length: f64, spacing: f64 },
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("depth map has no valid pixels")]
    AllHoles,
    #[error("depth map contains {0} hole pixels")]
    HolePresent(usize),
    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("node {node} has {count} frames, need at least 2")]
    NodeTooSmall { node: usize, count: usize },
    #[error("label {label} out of range for {num_nodes} nodes")]
    LabelOutOfRange { label: usize, num_nodes: usize },
    #[error("{path}: unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: checksum mismatch or truncated file")]
    ChecksumMismatch { path: PathBuf },
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("refusing to read test-split frame {frame_id} during training")]
    TestSplitAccess { frame_id: usize },
    #[error("frame {frame_id}: {source}")]
    Frame {
        frame_id: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
